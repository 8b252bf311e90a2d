//! Posterior-mean and Monte Carlo predictive inference, plus accuracy,
//! ECE and NLL.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LrvdError, Result};
use crate::model::{AdapterMode, BackboneModel};
use crate::numerics::{Matrix, RngState};
use crate::parallel::{map_indexed, Execution};
use crate::task::{Dataset, TaskKind, Targets};

pub const DEFAULT_ECE_BINS: usize = 15;
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum Predictive {
    /// n x C class probabilities.
    Probabilities(Matrix),
    /// Per-output predictive mean and variance across samples.
    Regression { mean: Matrix, var: Matrix },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveResult {
    pub k: usize,
    pub output: Predictive,
    /// Filled by [`PredictiveResult::score`].
    pub correct: Option<Vec<bool>>,
}

impl PredictiveResult {
    pub fn len(&self) -> usize {
        match &self.output {
            Predictive::Probabilities(p) => p.rows(),
            Predictive::Regression { mean, .. } => mean.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn probabilities(&self) -> Option<&Matrix> {
        match &self.output {
            Predictive::Probabilities(p) => Some(p),
            Predictive::Regression { .. } => None,
        }
    }

    /// Predicted class (first maximum) and its probability, per example.
    pub fn predictions(&self) -> Option<Vec<(usize, f64)>> {
        let p = self.probabilities()?;
        Some(
            (0..p.rows())
                .map(|i| {
                    p.row(i)
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                })
                .collect(),
        )
    }

    /// Records per-example correctness against `labels`.
    pub fn score(&mut self, labels: &[usize]) -> Result<()> {
        let preds = self
            .predictions()
            .ok_or_else(|| LrvdError::InvalidArgument("correctness needs a classification result".into()))?;
        if preds.len() != labels.len() {
            return shape_err("score", format!("{} labels for {} predictions", labels.len(), preds.len()));
        }
        self.correct = Some(preds.iter().zip(labels).map(|((p, _), l)| p == l).collect());
        Ok(())
    }
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Predictive distribution from `k` posterior samples.
///
/// `k = 0` is a single posterior-mean pass. For `k ≥ 1`, sample `s` draws
/// every adapter's factors from substream `s` of `rng`; per-sample outputs
/// land in their own slot and are averaged in index order, so the result
/// does not depend on `exec`.
pub fn mc_predict(
    model: &BackboneModel,
    inputs: &Matrix,
    k: usize,
    rng: &RngState,
    exec: Execution,
) -> Result<PredictiveResult> {
    let classify = model.task == TaskKind::Classification;
    if k == 0 {
        let out = model.forward_deterministic(inputs)?;
        let output = if classify {
            Predictive::Probabilities(softmax_rows(&out))
        } else {
            let var = Matrix::zeros(out.rows(), out.cols());
            Predictive::Regression { mean: out, var }
        };
        return Ok(PredictiveResult {
            k,
            output,
            correct: None,
        });
    }
    let samples: Vec<Result<Matrix>> = map_indexed(k, exec, |s| {
        let mut sub = rng.split(s as u64);
        let out = model.forward(inputs, AdapterMode::DirectSample(&mut sub))?;
        Ok(if classify { softmax_rows(&out) } else { out })
    });
    let samples: Vec<Matrix> = samples.into_iter().collect::<Result<_>>()?;
    let (rows, cols) = samples[0].shape();
    let mut mean = Matrix::zeros(rows, cols);
    for s in &samples {
        mean.add_assign(s)?;
    }
    let mean = mean.scale(1.0 / k as f64);
    let output = if classify {
        Predictive::Probabilities(mean)
    } else {
        let mut var = Matrix::zeros(rows, cols);
        for s in &samples {
            var.add_assign(&s.sub(&mean)?.map(|v| v * v))?;
        }
        Predictive::Regression {
            mean,
            var: var.scale(1.0 / k as f64),
        }
    };
    Ok(PredictiveResult {
        k,
        output,
        correct: None,
    })
}

pub fn accuracy(result: &PredictiveResult) -> Result<f64> {
    let correct = result
        .correct
        .as_ref()
        .ok_or_else(|| LrvdError::InvalidArgument("accuracy needs a scored classification result".into()))?;
    if correct.is_empty() {
        return Err(LrvdError::InvalidArgument("accuracy of an empty result".into()));
    }
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

/// Expected calibration error over `n_bins` equal-width confidence bins.
pub fn ece(result: &PredictiveResult, n_bins: usize) -> Result<f64> {
    let preds = result
        .predictions()
        .ok_or_else(|| LrvdError::InvalidArgument("ece needs a classification result".into()))?;
    let correct = result
        .correct
        .as_ref()
        .ok_or_else(|| LrvdError::InvalidArgument("ece needs a scored result".into()))?;
    if preds.is_empty() {
        return Err(LrvdError::InvalidArgument("ece of an empty result".into()));
    }
    if n_bins == 0 {
        return Err(LrvdError::InvalidArgument("ece needs at least one bin".into()));
    }
    let confidences: Vec<f64> = preds.iter().map(|p| p.1).collect();
    Ok(binned_calibration_error(&confidences, correct, n_bins))
}

/// `Σ_b (|b| / N) · |acc(b) − conf(b)|` with empty bins contributing zero.
pub fn binned_calibration_error(confidences: &[f64], correct: &[bool], n_bins: usize) -> f64 {
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * n_bins as f64).floor() as usize).min(n_bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(ok);
    }
    let n = confidences.len() as f64;
    (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum()
}

/// Mean `−log p(true class)` with probabilities floored at 1e-12.
pub fn nll(result: &PredictiveResult, labels: &[usize]) -> Result<f64> {
    let p = result
        .probabilities()
        .ok_or_else(|| LrvdError::InvalidArgument("nll needs a classification result".into()))?;
    if labels.len() != p.rows() {
        return shape_err("nll", format!("{} labels for {} rows", labels.len(), p.rows()));
    }
    if labels.is_empty() {
        return Err(LrvdError::InvalidArgument("nll of an empty result".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= p.cols()) {
        return Err(LrvdError::InvalidArgument(format!("label {bad} out of range for {} classes", p.cols())));
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -p[(i, l)].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / labels.len() as f64)
}

/// Half the mean squared error summed over outputs: the unit-variance
/// Gaussian NLL up to a constant, matching the regression training loss.
pub fn regression_loss(mean: &Matrix, targets: &Matrix) -> Result<f64> {
    let d = mean.sub(targets)?;
    Ok(0.5 * d.frobenius_norm_sq() / mean.rows() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
    /// Classification NLL, or the regression loss for regression tasks.
    pub nll: f64,
}

pub fn evaluate(
    model: &BackboneModel,
    data: &Dataset,
    k: usize,
    rng: &RngState,
    exec: Execution,
    n_bins: usize,
) -> Result<EvalMetrics> {
    let mut result = mc_predict(model, &data.x, k, rng, exec)?;
    match &data.y {
        Targets::Classes(labels) => {
            result.score(labels)?;
            Ok(EvalMetrics {
                k,
                accuracy: Some(accuracy(&result)?),
                ece: Some(ece(&result, n_bins)?),
                nll: nll(&result, labels)?,
            })
        }
        Targets::Regression(y) => {
            let Predictive::Regression { mean, .. } = &result.output else {
                return Err(LrvdError::InvalidArgument("regression targets for a classification model".into()));
            };
            Ok(EvalMetrics {
                k,
                accuracy: None,
                ece: None,
                nll: regression_loss(mean, y)?,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub nll: f64,
    pub seconds: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "k,accuracy,ece,nll,seconds";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.k, opt(self.accuracy), opt(self.ece), self.nll, self.seconds)
    }
}

/// Seed for row `row` of a sample sweep; rows never share substreams.
fn row_state(rng: &RngState, row: usize) -> RngState {
    RngState::new(rng.seed() ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(row as u64 + 1)))
}

/// One evaluation per `k` on a shared input set, with wall-clock per row.
pub fn sample_sweep(
    model: &BackboneModel,
    data: &Dataset,
    k_list: &[usize],
    rng: &RngState,
    exec: Execution,
    n_bins: usize,
) -> Result<Vec<SweepRow>> {
    if k_list.is_empty() {
        return Err(LrvdError::InvalidArgument("k list is empty".into()));
    }
    k_list
        .iter()
        .enumerate()
        .map(|(row, &k)| {
            let state = row_state(rng, row);
            let start = Instant::now();
            let m = evaluate(model, data, k, &state, exec, n_bins)?;
            Ok(SweepRow {
                k,
                accuracy: m.accuracy,
                ece: m.ece,
                nll: m.nll,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}
