use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Matrix;
use crate::error::{LrvdError, Result};

/// Seeded, splittable random stream.
///
/// `split(i)` yields substream `i` of the same seed: an independent ChaCha
/// stream that does not depend on how much the parent has been consumed,
/// so parallel samplers indexed by slot reproduce the serial result.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Substream `index` of this state's seed. Stream 0 is the parent's own.
    pub fn split(&self, index: u64) -> RngState {
        Self::substream(self.seed, index)
    }

    pub fn substream(seed: u64, index: u64) -> RngState {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(index.wrapping_add(1));
        RngState { seed, inner }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniformly random permutation of `0..n` (Fisher-Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, mean: f64, std: f64) -> Result<Matrix> {
        sample_gaussian(self, rows, cols, mean, std)
    }
}

/// I.i.d. `N(mean, std²)` entries.
pub fn sample_gaussian(rng: &mut RngState, rows: usize, cols: usize, mean: f64, std: f64) -> Result<Matrix> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(LrvdError::InvalidArgument(format!(
            "sample_gaussian requires finite mean and std >= 0, got mean {mean}, std {std}"
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(LrvdError::InvalidArgument(format!(
            "matrix dimensions must be positive, got {rows}x{cols}"
        )));
    }
    if std == 0.0 {
        return Ok(Matrix::filled(rows, cols, mean));
    }
    Ok(Matrix::from_fn(rows, cols, |_, _| mean + std * rng.normal()))
}

/// Matrix-normal sample with diagonal row and column covariances:
/// entry `(i, j)` is `N(mean_ij, row_cov_diag_i · col_cov_diag_j)`.
pub fn sample_matrix_normal(
    rng: &mut RngState,
    mean: &Matrix,
    row_cov_diag: &[f64],
    col_cov_diag: &[f64],
) -> Result<Matrix> {
    if row_cov_diag.len() != mean.rows() || col_cov_diag.len() != mean.cols() {
        return Err(LrvdError::Shape {
            op: "sample_matrix_normal",
            detail: format!(
                "covariance diagonals of length {}/{} for a {}x{} mean",
                row_cov_diag.len(),
                col_cov_diag.len(),
                mean.rows(),
                mean.cols()
            ),
        });
    }
    if let Some(bad) = row_cov_diag
        .iter()
        .chain(col_cov_diag)
        .find(|v| !(**v > 0.0) || !v.is_finite())
    {
        return Err(LrvdError::InvalidArgument(format!(
            "covariance diagonal entries must be positive, got {bad}"
        )));
    }
    let row_sd: Vec<f64> = row_cov_diag.iter().map(|v| v.sqrt()).collect();
    let col_sd: Vec<f64> = col_cov_diag.iter().map(|v| v.sqrt()).collect();
    Ok(Matrix::from_fn(mean.rows(), mean.cols(), |i, j| {
        mean[(i, j)] + row_sd[i] * col_sd[j] * rng.normal()
    }))
}
