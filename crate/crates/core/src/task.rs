//! Synthetic tasks with known ground truth.
//!
//! Tasks are defined entirely by their generator parameters; data is
//! regenerated from the seed and never stored.

use serde::{Deserialize, Serialize};

use crate::error::{LrvdError, Result};
use crate::numerics::{linalg, Matrix, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// `y = (W0 + ΔW*) x + η` with `rank(ΔW*) = r_star`.
    Regression {
        d_in: usize,
        d_out: usize,
        r_star: usize,
        /// Teacher singular values; defaults to `r_star, r_star - 1, ..., 1`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spectrum: Option<Vec<f64>>,
        #[serde(default = "default_noise_std")]
        noise_std: f64,
        n_train: usize,
        #[serde(default = "default_n_eval")]
        n_val: usize,
        #[serde(default = "default_n_eval")]
        n_test: usize,
        seed: u64,
    },
    /// Gaussian class clusters with uniform label resampling.
    Classification {
        d_in: usize,
        n_classes: usize,
        separation: f64,
        #[serde(default)]
        label_noise: f64,
        n_train: usize,
        #[serde(default = "default_n_eval")]
        n_val: usize,
        #[serde(default = "default_n_eval")]
        n_test: usize,
        seed: u64,
    },
}

fn default_noise_std() -> f64 {
    0.1
}

fn default_n_eval() -> usize {
    500
}

impl TaskConfig {
    pub fn seed(&self) -> u64 {
        match self {
            TaskConfig::Regression { seed, .. } | TaskConfig::Classification { seed, .. } => *seed,
        }
    }

    pub fn with_seed(&self, new_seed: u64) -> TaskConfig {
        let mut c = self.clone();
        match &mut c {
            TaskConfig::Regression { seed, .. } | TaskConfig::Classification { seed, .. } => *seed = new_seed,
        }
        c
    }

    pub fn d_in(&self) -> usize {
        match self {
            TaskConfig::Regression { d_in, .. } | TaskConfig::Classification { d_in, .. } => *d_in,
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            TaskConfig::Regression { .. } => TaskKind::Regression,
            TaskConfig::Classification { .. } => TaskKind::Classification,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Regression(Matrix),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(m) => m.rows(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Classes(c) => Some(c),
            Targets::Regression(_) => None,
        }
    }

    /// Rows `idx` of the targets.
    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Regression(m) => Targets::Regression(select_rows(m, idx)),
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// n x d_in.
    pub x: Matrix,
    pub y: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: select_rows(&self.x, idx),
            y: self.y.select(idx),
        }
    }
}

pub fn select_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), m.cols(), |i, j| m[(idx[i], j)])
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub d_in: usize,
    /// Output dimension (regression) or class count.
    pub d_out: usize,
    /// Frozen base weight the regression teacher shares with the backbone.
    pub base_weight: Option<Matrix>,
    /// Teacher update `ΔW*` (regression only).
    pub teacher_delta: Option<Matrix>,
    pub r_star: usize,
    pub spectrum: Vec<f64>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SyntheticTask {
    pub fn generate(config: &TaskConfig) -> Result<Self> {
        match config {
            TaskConfig::Regression {
                d_in,
                d_out,
                r_star,
                spectrum,
                noise_std,
                n_train,
                n_val,
                n_test,
                seed,
            } => make_lowrank_regression_task(
                *d_in,
                *d_out,
                *r_star,
                spectrum.clone(),
                *noise_std,
                [*n_train, *n_val, *n_test],
                *seed,
            ),
            TaskConfig::Classification {
                d_in,
                n_classes,
                separation,
                label_noise,
                n_train,
                n_val,
                n_test,
                seed,
            } => make_cluster_classification_task(
                *d_in,
                *n_classes,
                *separation,
                *label_noise,
                [*n_train, *n_val, *n_test],
                *seed,
            ),
        }
    }

    pub fn kind(&self) -> TaskKind {
        self.config.kind()
    }
}

/// Linearly decaying spectrum `r, r-1, ..., 1`.
pub fn linear_spectrum(r: usize) -> Vec<f64> {
    (0..r).map(|i| (r - i) as f64).collect()
}

/// Low-rank regression teacher `y = (W0 + Σ_i s_i u_i v_iᵀ) x + η`.
pub fn make_lowrank_regression_task(
    d_in: usize,
    d_out: usize,
    r_star: usize,
    spectrum: Option<Vec<f64>>,
    noise_std: f64,
    counts: [usize; 3],
    seed: u64,
) -> Result<SyntheticTask> {
    if d_in == 0 || d_out == 0 {
        return Err(LrvdError::InvalidArgument("task dimensions must be positive".into()));
    }
    if r_star > d_in.min(d_out) {
        return Err(LrvdError::InvalidArgument(format!(
            "teacher rank {r_star} exceeds min(d_in, d_out) = {}",
            d_in.min(d_out)
        )));
    }
    let spectrum = spectrum.unwrap_or_else(|| linear_spectrum(r_star));
    if spectrum.len() != r_star {
        return Err(LrvdError::InvalidArgument(format!(
            "spectrum has {} values for teacher rank {r_star}",
            spectrum.len()
        )));
    }
    if spectrum.iter().any(|&s| !(s > 0.0)) || spectrum.windows(2).any(|w| w[1] > w[0]) {
        return Err(LrvdError::InvalidArgument("spectrum must be positive and descending".into()));
    }
    if !(noise_std >= 0.0) {
        return Err(LrvdError::InvalidArgument(format!("noise_std must be >= 0, got {noise_std}")));
    }
    check_counts(counts)?;

    let mut rng = RngState::new(seed);
    let base = rng.gaussian_matrix(d_out, d_in, 0.0, (1.0 / d_in as f64).sqrt())?;
    let delta = if r_star == 0 {
        Matrix::zeros(d_out, d_in)
    } else {
        let u = linalg::random_orthonormal_columns(&mut rng, d_out, r_star)?;
        let v = linalg::random_orthonormal_columns(&mut rng, d_in, r_star)?;
        u.scale_cols(&spectrum)?.matmul_t(&v)?
    };
    let teacher = base.add(&delta)?;
    let split = |n: usize, stream: u64| -> Result<Dataset> {
        let mut r = rng.split(stream);
        let x = r.gaussian_matrix(n, d_in, 0.0, 1.0)?;
        let noise = sample_noise(&mut r, n, d_out, noise_std)?;
        let y = x.matmul_t(&teacher)?.add(&noise)?;
        Ok(Dataset {
            x,
            y: Targets::Regression(y),
        })
    };
    let train = split(counts[0], 0)?;
    let val = split(counts[1], 1)?;
    let test = split(counts[2], 2)?;
    Ok(SyntheticTask {
        config: TaskConfig::Regression {
            d_in,
            d_out,
            r_star,
            spectrum: Some(spectrum.clone()),
            noise_std,
            n_train: counts[0],
            n_val: counts[1],
            n_test: counts[2],
            seed,
        },
        d_in,
        d_out,
        base_weight: Some(base),
        teacher_delta: Some(delta),
        r_star,
        spectrum,
        train,
        val,
        test,
    })
}

fn sample_noise(rng: &mut RngState, n: usize, d: usize, std: f64) -> Result<Matrix> {
    rng.gaussian_matrix(n, d, 0.0, std)
}

fn check_counts(counts: [usize; 3]) -> Result<()> {
    if counts.contains(&0) {
        return Err(LrvdError::InvalidArgument(format!(
            "train/val/test counts must be positive, got {counts:?}"
        )));
    }
    Ok(())
}

/// Unit-variance Gaussian clusters whose means sit at distance
/// `separation / 2` from the origin along random directions. A fraction
/// `label_noise` of labels is redrawn uniformly over all classes.
pub fn make_cluster_classification_task(
    d_in: usize,
    n_classes: usize,
    separation: f64,
    label_noise: f64,
    counts: [usize; 3],
    seed: u64,
) -> Result<SyntheticTask> {
    if n_classes < 2 {
        return Err(LrvdError::InvalidArgument(format!("need at least 2 classes, got {n_classes}")));
    }
    if d_in == 0 {
        return Err(LrvdError::InvalidArgument("d_in must be positive".into()));
    }
    if !(0.0..=1.0).contains(&label_noise) {
        return Err(LrvdError::InvalidArgument(format!(
            "label_noise must lie in [0, 1], got {label_noise}"
        )));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(LrvdError::InvalidArgument(format!("separation must be >= 0, got {separation}")));
    }
    check_counts(counts)?;
    let mut rng = RngState::new(seed);
    let dirs = rng.gaussian_matrix(n_classes, d_in, 0.0, 1.0)?;
    let means = Matrix::from_fn(n_classes, d_in, |c, j| {
        let norm = dirs.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
        0.5 * separation * dirs[(c, j)] / norm
    });
    let split = |n: usize, stream: u64| -> Result<Dataset> {
        let mut r = rng.split(stream);
        let mut x = Matrix::zeros(n, d_in);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % n_classes;
            for j in 0..d_in {
                x[(i, j)] = means[(c, j)] + r.normal();
            }
            let label = if r.uniform() < label_noise { r.below(n_classes) } else { c };
            labels.push(label);
        }
        Ok(Dataset {
            x,
            y: Targets::Classes(labels),
        })
    };
    let (train, val, test) = (split(counts[0], 0)?, split(counts[1], 1)?, split(counts[2], 2)?);
    Ok(SyntheticTask {
        config: TaskConfig::Classification {
            d_in,
            n_classes,
            separation,
            label_noise,
            n_train: counts[0],
            n_val: counts[1],
            n_test: counts[2],
            seed,
        },
        d_in,
        d_out: n_classes,
        base_weight: None,
        teacher_delta: None,
        r_star: 0,
        spectrum: Vec::new(),
        train,
        val,
        test,
    })
}
