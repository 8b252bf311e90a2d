use super::matrix::{dot, Matrix};
use crate::error::{LrvdError, Result};

pub const DEFAULT_MAX_SWEEPS: usize = 60;
pub const DEFAULT_TOLERANCE: f64 = 1e-12;

/// Thin SVD `m = u · diag(sigma) · vᵀ` with `k = min(rows, cols)` components.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// rows x k, orthonormal columns.
    pub u: Matrix,
    /// Descending, non-negative, length k.
    pub sigma: Vec<f64>,
    /// cols x k, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        self.u
            .scale_cols(&self.sigma)
            .and_then(|us| us.matmul_t(&self.v))
            .expect("svd factors have consistent shapes")
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    svd_with(m, DEFAULT_TOLERANCE, DEFAULT_MAX_SWEEPS)
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns are rotated pairwise until every pair is orthogonal to within
/// `tol` relative to their norms. Wide inputs are handled by factoring the
/// transpose.
pub fn svd_with(m: &Matrix, tol: f64, max_sweeps: usize) -> Result<SvdResult> {
    if !m.all_finite() {
        return Err(LrvdError::InvalidArgument("svd input has non-finite entries".into()));
    }
    if m.rows() < m.cols() {
        let t = svd_with(&m.transpose(), tol, max_sweeps)?;
        return Ok(SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    let (rows, n) = m.shape();
    // Work column-major: cols[j] is column j of the running A·V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| m.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    let mut sweep = 0;
    while !converged {
        if sweep == max_sweeps {
            return Err(LrvdError::SvdNoConvergence {
                rows: m.rows(),
                cols: m.cols(),
                sweeps: max_sweeps,
            });
        }
        sweep += 1;
        converged = true;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let negligible = scale * 1e-14 * (rows.max(n) as f64);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    let mut sigma = Vec::with_capacity(n);
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s > negligible && s > 0.0 {
            ucols.push(cols[j].iter().map(|v| v / s).collect());
            sigma.push(s);
        } else {
            ucols.push(vec![0.0; rows]);
            sigma.push(if s > 0.0 { s } else { 0.0 });
            missing.push(slot);
        }
    }
    complete_orthonormal(&mut ucols, &missing, rows);

    let u = Matrix::from_fn(rows, n, |i, k| ucols[k][i]);
    let v = Matrix::from_fn(n, n, |i, k| vcols[order[k]][i]);
    Ok(SvdResult { u, sigma, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills the `missing` slots with unit vectors orthogonal to every other
/// column, drawing candidates from the standard basis.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize], dim: usize) {
    let mut candidate = 0;
    for &slot in missing {
        loop {
            assert!(candidate < dim, "ran out of basis vectors while completing U");
            let mut v = vec![0.0; dim];
            v[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, other) in cols.iter().enumerate() {
                    if k == slot {
                        continue;
                    }
                    let proj = dot(&v, other);
                    for (a, b) in v.iter_mut().zip(other) {
                        *a -= proj * b;
                    }
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-6 {
                cols[slot] = v.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}
