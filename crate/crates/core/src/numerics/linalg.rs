//! Small dense helpers: inversion, QR and Haar-random orthogonal matrices.

use super::matrix::{dot, Matrix};
use super::rng::RngState;
use crate::error::{shape_err, LrvdError, Result};

/// Condition numbers above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return shape_err("inverse", format!("{}x{} is not square", m.rows(), m.cols()));
    }
    let n = m.rows();
    let mut a = m.clone();
    let mut inv = Matrix::identity(n);
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
            .expect("non-empty range");
        if a[(pivot, col)].abs() <= scale * 1e-14 {
            return Err(LrvdError::Singular(f64::INFINITY));
        }
        if pivot != col {
            for j in 0..n {
                let (x, y) = (a[(col, j)], a[(pivot, j)]);
                a[(col, j)] = y;
                a[(pivot, j)] = x;
                let (x, y) = (inv[(col, j)], inv[(pivot, j)]);
                inv[(col, j)] = y;
                inv[(pivot, j)] = x;
            }
        }
        let p = a[(col, col)];
        for j in 0..n {
            a[(col, j)] /= p;
            inv[(col, j)] /= p;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = a[(i, col)];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[(i, j)] -= f * a[(col, j)];
                inv[(i, j)] -= f * inv[(col, j)];
            }
        }
    }
    Ok(inv)
}

/// 2-norm condition number via singular values.
pub fn condition_number(m: &Matrix) -> Result<f64> {
    let s = super::svd(m)?.sigma;
    let min = *s.last().expect("non-empty");
    Ok(if min == 0.0 { f64::INFINITY } else { s[0] / min })
}

/// Modified Gram-Schmidt QR of a tall matrix: `m = q · r`, `q` with
/// orthonormal columns and `r` upper triangular.
pub fn qr(m: &Matrix) -> Result<(Matrix, Matrix)> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return shape_err("qr", format!("{rows}x{cols} is wider than tall"));
    }
    let mut q: Vec<Vec<f64>> = (0..cols).map(|j| m.col(j)).collect();
    let mut r = Matrix::zeros(cols, cols);
    for j in 0..cols {
        // Two passes of orthogonalization keep q orthonormal to machine precision.
        for _ in 0..2 {
            for k in 0..j {
                let proj = dot(&q[k], &q[j]);
                r[(k, j)] += proj;
                let qk = q[k].clone();
                for (a, b) in q[j].iter_mut().zip(&qk) {
                    *a -= proj * b;
                }
            }
        }
        let norm = dot(&q[j], &q[j]).sqrt();
        if norm == 0.0 {
            return Err(LrvdError::Singular(f64::INFINITY));
        }
        r[(j, j)] = norm;
        for a in q[j].iter_mut() {
            *a /= norm;
        }
    }
    Ok((Matrix::from_fn(rows, cols, |i, j| q[j][i]), r))
}

/// Haar-distributed orthogonal `n x n` matrix: QR of a Gaussian matrix with
/// the signs of `diag(r)` folded into `q`.
pub fn haar_orthogonal(rng: &mut RngState, n: usize) -> Result<Matrix> {
    let g = rng.gaussian_matrix(n, n, 0.0, 1.0)?;
    let (q, r) = qr(&g)?;
    let signs: Vec<f64> = (0..n).map(|i| if r[(i, i)] < 0.0 { -1.0 } else { 1.0 }).collect();
    q.scale_cols(&signs)
}

/// `n x k` matrix with orthonormal columns, uniformly random.
pub fn random_orthonormal_columns(rng: &mut RngState, n: usize, k: usize) -> Result<Matrix> {
    let g = rng.gaussian_matrix(n, k, 0.0, 1.0)?;
    let (q, r) = qr(&g)?;
    let signs: Vec<f64> = (0..k).map(|i| if r[(i, i)] < 0.0 { -1.0 } else { 1.0 }).collect();
    q.scale_cols(&signs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_roundtrip() {
        let mut rng = RngState::new(1);
        let m = rng.gaussian_matrix(5, 5, 0.0, 1.0).unwrap();
        let inv = inverse(&m).unwrap();
        assert!(m.matmul(&inv).unwrap().max_abs_diff(&Matrix::identity(5)) < 1e-10);
    }

    #[test]
    fn singular_rejected() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(inverse(&m), Err(LrvdError::Singular(_))));
    }

    #[test]
    fn haar_is_orthogonal() {
        let mut rng = RngState::new(2);
        for _ in 0..10 {
            let q = haar_orthogonal(&mut rng, 6).unwrap();
            assert!(q.matmul_t(&q).unwrap().max_abs_diff(&Matrix::identity(6)) < 1e-12);
        }
    }

    #[test]
    fn qr_reconstructs() {
        let mut rng = RngState::new(3);
        let m = rng.gaussian_matrix(7, 4, 0.0, 1.0).unwrap();
        let (q, r) = qr(&m).unwrap();
        assert!(q.matmul(&r).unwrap().max_abs_diff(&m) < 1e-12);
        for i in 0..4 {
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }
}
