use serde::{Deserialize, Serialize};

use crate::error::{LrvdError, Result};
use crate::numerics::linalg::{condition_number, haar_orthogonal, inverse, MAX_CONDITION};
use crate::numerics::{Matrix, RngState};
use crate::parallel::{map_indexed, Execution};

/// A candidate reparameterization `R` of a rank-tied posterior with
/// diagonal rank covariance `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetryProbe {
    pub d: Vec<f64>,
    pub r: Matrix,
    pub tol: f64,
}

impl SymmetryProbe {
    pub fn new(d: Vec<f64>, r: Matrix, tol: f64) -> Result<Self> {
        if !r.is_square() || r.rows() != d.len() {
            return Err(LrvdError::Shape {
                op: "SymmetryProbe",
                detail: format!("R is {}x{}, D has {} entries", r.rows(), r.cols(), d.len()),
            });
        }
        if let Some(bad) = d.iter().find(|&&v| !(v > 0.0)) {
            return Err(LrvdError::InvalidArgument(format!("D entries must be positive, got {bad}")));
        }
        if !(tol > 0.0) {
            return Err(LrvdError::InvalidArgument(format!("tolerance must be positive, got {tol}")));
        }
        Ok(Self { d, r, tol })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryCheck {
    pub orthogonal: bool,
    pub both_diagonal: bool,
    /// Both transformed covariances diagonal and equal to each other.
    pub equal_diagonal: bool,
    pub is_signed_permutation: bool,
    /// `max |R Rᵀ − I|`.
    pub orthogonality_error: f64,
    /// Largest off-diagonal magnitude of `R⁻¹ D R⁻ᵀ` and `Rᵀ D R`.
    pub off_diagonal: f64,
    /// `max |R⁻¹ D R⁻ᵀ − Rᵀ D R|`.
    pub covariance_mismatch: f64,
}

/// Transformed covariances `(R⁻¹ D R⁻ᵀ, Rᵀ D R)` of the two factors.
pub fn transformed_covariances(d: &[f64], r: &Matrix) -> Result<(Matrix, Matrix)> {
    let r_inv = inverse(r)?;
    let left = r_inv.scale_cols(d)?.matmul_t(&r_inv)?;
    let right = r.transpose().scale_cols(d)?.matmul(r)?;
    Ok((left, right))
}

pub fn residual_symmetry_check(probe: &SymmetryProbe) -> Result<SymmetryCheck> {
    let r = &probe.r;
    let n = r.rows();
    let cond = condition_number(r)?;
    if !(cond <= MAX_CONDITION) {
        return Err(LrvdError::Singular(cond));
    }
    let orthogonality_error = r.matmul_t(r)?.max_abs_diff(&Matrix::identity(n));
    let (left, right) = transformed_covariances(&probe.d, r)?;
    let off_diagonal = left.max_off_diagonal().max(right.max_off_diagonal());
    let covariance_mismatch = left.max_abs_diff(&right);
    let both_diagonal = off_diagonal < probe.tol;
    Ok(SymmetryCheck {
        orthogonal: orthogonality_error < probe.tol,
        both_diagonal,
        equal_diagonal: both_diagonal && covariance_mismatch < probe.tol,
        is_signed_permutation: is_signed_permutation(r, probe.tol),
        orthogonality_error,
        off_diagonal,
        covariance_mismatch,
    })
}

/// Exactly one entry of magnitude 1 per row and column, the rest 0.
pub fn is_signed_permutation(r: &Matrix, tol: f64) -> bool {
    if !r.is_square() {
        return false;
    }
    let n = r.rows();
    let mut col_hits = vec![0usize; n];
    for i in 0..n {
        let mut row_hits = 0;
        for j in 0..n {
            let v = r[(i, j)].abs();
            if (v - 1.0).abs() < tol {
                row_hits += 1;
                col_hits[j] += 1;
            } else if v >= tol {
                return false;
            }
        }
        if row_hits != 1 {
            return false;
        }
    }
    col_hits.iter().all(|&c| c == 1)
}

/// Samples `A ~ MN(0, D, I)` with `n_samples` columns, forms `A' = R⁻¹ A`
/// and returns `max |cov(A') − R⁻¹ D R⁻ᵀ|` of the row covariance.
pub fn mc_covariance_transform_check(d: &[f64], r: &Matrix, n_samples: usize, rng: &mut RngState) -> Result<f64> {
    SymmetryProbe::new(d.to_vec(), r.clone(), 1.0)?;
    if n_samples == 0 {
        return Err(LrvdError::InvalidArgument("n_samples must be positive".into()));
    }
    let (expected, _) = transformed_covariances(d, r)?;
    let std: Vec<f64> = d.iter().map(|v| v.sqrt()).collect();
    let a = Matrix::from_fn(d.len(), n_samples, |i, _| std[i] * rng.normal());
    let a_prime = inverse(r)?.matmul(&a)?;
    let empirical = a_prime.matmul_t(&a_prime)?.scale(1.0 / n_samples as f64);
    Ok(empirical.max_abs_diff(&expected))
}

/// Uniformly random signed permutation matrix.
pub fn random_signed_permutation(rng: &mut RngState, n: usize) -> Matrix {
    let perm = rng.permutation(n);
    let mut m = Matrix::zeros(n, n);
    for (i, &j) in perm.iter().enumerate() {
        m[(i, j)] = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    }
    m
}

/// Positive diagonal with well-separated entries in `[1, 1 + 2n)`.
fn distinct_diagonal(rng: &mut RngState, n: usize) -> Vec<f64> {
    let perm = rng.permutation(n);
    perm.iter().map(|&p| 1.0 + 2.0 * p as f64 + rng.uniform()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremSuiteConfig {
    pub rank: usize,
    pub n_permutations: usize,
    pub n_rotations: usize,
    pub n_non_orthogonal: usize,
    /// Off-diagonal tolerance for "diagonal".
    pub tol: f64,
    /// Rotations must exceed this off-diagonal magnitude.
    pub violation_floor: f64,
    /// Signed permutations must stay below this off-diagonal magnitude.
    pub permutation_floor: f64,
    pub seed: u64,
}

impl Default for TheoremSuiteConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            n_permutations: 500,
            n_rotations: 500,
            n_non_orthogonal: 100,
            tol: 1e-9,
            violation_floor: 1e-6,
            permutation_floor: 1e-12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSection {
    pub name: String,
    pub probes: usize,
    pub failures: usize,
    pub errors: usize,
    /// Largest off-diagonal seen (permutations) or smallest (rotations);
    /// for non-orthogonal probes, the smallest covariance mismatch.
    pub extreme_deviation: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub config: TheoremSuiteConfig,
    /// Orthogonal probes: signed permutations plus rotations.
    pub probes: usize,
    pub failures: usize,
    pub sections: Vec<SuiteSection>,
    pub passed: bool,
}

enum Outcome {
    Ok(f64),
    Fail(f64),
    Error,
}

fn section(name: &str, outcomes: Vec<Outcome>, pick_max: bool) -> SuiteSection {
    let mut failures = 0;
    let mut errors = 0;
    let mut extreme = if pick_max { 0.0 } else { f64::INFINITY };
    for o in &outcomes {
        let v = match o {
            Outcome::Ok(v) => *v,
            Outcome::Fail(v) => {
                failures += 1;
                *v
            }
            Outcome::Error => {
                errors += 1;
                continue;
            }
        };
        extreme = if pick_max { f64::max(extreme, v) } else { f64::min(extreme, v) };
    }
    SuiteSection {
        name: name.into(),
        probes: outcomes.len(),
        failures,
        errors,
        extreme_deviation: extreme,
        passed: failures == 0 && errors == 0,
    }
}

/// Randomized check that, for distinct rank variances, the only
/// reparameterizations keeping both factor covariances diagonal are signed
/// permutations. Probe `i` of each section uses its own substream.
pub fn theorem_suite(cfg: &TheoremSuiteConfig, exec: Execution) -> Result<SymmetryReport> {
    if cfg.rank < 2 {
        return Err(LrvdError::InvalidArgument("theorem suite needs rank >= 2".into()));
    }
    let n = cfg.rank;
    let stream = |section: u64, i: usize| RngState::substream(cfg.seed, section << 32 | i as u64);

    let perms = map_indexed(cfg.n_permutations, exec, |i| {
        let mut rng = stream(1, i);
        let d = distinct_diagonal(&mut rng, n);
        let r = random_signed_permutation(&mut rng, n);
        match SymmetryProbe::new(d, r, cfg.tol).and_then(|p| residual_symmetry_check(&p)) {
            Ok(c) if c.both_diagonal && c.is_signed_permutation && c.off_diagonal < cfg.permutation_floor => {
                Outcome::Ok(c.off_diagonal)
            }
            Ok(c) => Outcome::Fail(c.off_diagonal),
            Err(_) => Outcome::Error,
        }
    });
    let rotations = map_indexed(cfg.n_rotations, exec, |i| {
        let mut rng = stream(2, i);
        let d = distinct_diagonal(&mut rng, n);
        let Ok(r) = haar_orthogonal(&mut rng, n) else {
            return Outcome::Error;
        };
        match SymmetryProbe::new(d, r, cfg.tol).and_then(|p| residual_symmetry_check(&p)) {
            Ok(c) => {
                let consistent = c.both_diagonal == c.is_signed_permutation;
                if consistent && !c.is_signed_permutation && c.off_diagonal > cfg.violation_floor {
                    Outcome::Ok(c.off_diagonal)
                } else {
                    Outcome::Fail(c.off_diagonal)
                }
            }
            Err(_) => Outcome::Error,
        }
    });
    let non_orthogonal = map_indexed(cfg.n_non_orthogonal, exec, |i| {
        let mut rng = stream(3, i);
        let d = distinct_diagonal(&mut rng, n);
        let r = loop {
            let Ok(g) = rng.gaussian_matrix(n, n, 0.0, 1.0) else {
                return Outcome::Error;
            };
            let orth_err = g.matmul_t(&g).map(|p| p.max_abs_diff(&Matrix::identity(n)));
            let cond = condition_number(&g);
            if matches!((orth_err, cond), (Ok(e), Ok(c)) if e > 1e-3 && c < 1e6) {
                break g;
            }
        };
        match SymmetryProbe::new(d, r, cfg.tol).and_then(|p| residual_symmetry_check(&p)) {
            Ok(c) if !c.orthogonal && !c.equal_diagonal => Outcome::Ok(c.covariance_mismatch),
            Ok(c) => Outcome::Fail(c.covariance_mismatch),
            Err(_) => Outcome::Error,
        }
    });

    let sections = vec![
        section("signed_permutations", perms, true),
        section("haar_rotations", rotations, false),
        section("non_orthogonal", non_orthogonal, false),
    ];
    let failures = sections.iter().map(|s| s.failures + s.errors).sum();
    Ok(SymmetryReport {
        config: *cfg,
        probes: cfg.n_permutations + cfg.n_rotations,
        failures,
        passed: sections.iter().all(|s| s.passed),
        sections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(d: &[f64], r: Matrix) -> SymmetryCheck {
        residual_symmetry_check(&SymmetryProbe::new(d.to_vec(), r, 1e-9).unwrap()).unwrap()
    }

    #[test]
    fn swap_is_a_residual_symmetry() {
        let r = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let c = check(&[1.0, 2.0], r.clone());
        assert!(c.orthogonal && c.both_diagonal && c.is_signed_permutation);
        let (_, right) = transformed_covariances(&[1.0, 2.0], &r).unwrap();
        assert_eq!(right, Matrix::diag(&[2.0, 1.0]));
    }

    #[test]
    fn rotation_breaks_distinct_diagonal() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let r = Matrix::from_rows(&[vec![s, -s], vec![s, s]]).unwrap();
        let c = check(&[1.0, 2.0], r);
        assert!(c.orthogonal && !c.both_diagonal && !c.is_signed_permutation);
        assert!((c.off_diagonal - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rotation_inside_repeated_eigenspace() {
        let (s, co) = (0.3f64.sin(), 0.3f64.cos());
        let r = Matrix::from_rows(&[vec![co, -s], vec![s, co]]).unwrap();
        let c = check(&[2.0, 2.0], r);
        assert!(c.both_diagonal && !c.is_signed_permutation);
    }

    #[test]
    fn singular_r_is_an_error() {
        let r = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let probe = SymmetryProbe::new(vec![1.0, 2.0], r, 1e-9).unwrap();
        assert!(matches!(residual_symmetry_check(&probe), Err(LrvdError::Singular(_))));
    }

    #[test]
    fn non_positive_d_rejected() {
        assert!(SymmetryProbe::new(vec![1.0, 0.0], Matrix::identity(2), 1e-9).is_err());
    }

    #[test]
    fn signed_permutation_detection() {
        let mut rng = RngState::new(4);
        for _ in 0..20 {
            assert!(is_signed_permutation(&random_signed_permutation(&mut rng, 5), 1e-12));
        }
        assert!(!is_signed_permutation(&Matrix::filled(2, 2, 1.0), 1e-12));
        assert!(!is_signed_permutation(&Matrix::diag(&[1.0, 0.5]), 1e-12));
    }

    #[test]
    fn mc_covariance_identity_and_rotation() {
        let mut rng = RngState::new(11);
        let dev = mc_covariance_transform_check(&[1.0, 1.0, 1.0], &Matrix::identity(3), 100_000, &mut rng).unwrap();
        assert!(dev < 0.05, "{dev}");
        let r = haar_orthogonal(&mut rng, 3).unwrap();
        let dev = mc_covariance_transform_check(&[1.0, 2.0, 3.0], &r, 100_000, &mut rng).unwrap();
        assert!(dev < 0.1, "{dev}");
        let (expected, _) = transformed_covariances(&[1.0, 2.0, 3.0], &r).unwrap();
        assert!(expected.max_off_diagonal() > 0.05);
    }

    #[test]
    fn small_suite_passes_in_both_modes() {
        let cfg = TheoremSuiteConfig {
            n_permutations: 30,
            n_rotations: 30,
            n_non_orthogonal: 10,
            ..TheoremSuiteConfig::default()
        };
        let a = theorem_suite(&cfg, Execution::Sequential).unwrap();
        let b = theorem_suite(&cfg, Execution::Parallel).unwrap();
        assert!(a.passed, "{a:?}");
        assert_eq!(a, b);
        assert_eq!(a.probes, 60);
    }
}
