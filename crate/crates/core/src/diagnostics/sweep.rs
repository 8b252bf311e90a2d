use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::energy::mean_std;
use crate::config::RunConfig;
use crate::error::{LrvdError, Result};
use crate::evaluator::{evaluate, sample_sweep};
use crate::model::{build_model, BackboneModel};
use crate::numerics::RngState;
use crate::parallel::{map_indexed, Execution};
use crate::task::SyntheticTask;
use crate::trainer::train_with;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    /// Full retrain per grid point and seed.
    Beta,
    /// Re-threshold one trained snapshot per seed.
    Tau,
    /// Monte Carlo sample counts on one trained snapshot per seed.
    Mc,
}

impl FromStr for SweepKind {
    type Err = LrvdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepKind::Beta),
            "tau" => Ok(SweepKind::Tau),
            "mc" | "mc_samples" => Ok(SweepKind::Mc),
            other => Err(LrvdError::InvalidArgument(format!(
                "unknown sweep kind {other:?}, expected beta, tau or mc"
            ))),
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepKind::Beta => "beta",
            SweepKind::Tau => "tau",
            SweepKind::Mc => "mc",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub nll: f64,
    /// Effective rank summed over adapters.
    pub r_eff: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub const CSV_HEADER: &'static str = "kind,value,seed,accuracy,ece,nll,r_eff,seconds";

    /// One row per cell, then `mean` and `std` rows per grid value.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            out += &format!(
                "{},{},{},{},{},{},{},{}\n",
                self.kind,
                c.value,
                c.seed,
                opt(c.accuracy),
                opt(c.ece),
                c.nll,
                c.r_eff,
                c.seconds
            );
        }
        let mut values: Vec<f64> = Vec::new();
        for c in &self.cells {
            if !values.contains(&c.value) {
                values.push(c.value);
            }
        }
        for v in values {
            let group: Vec<&SweepCell> = self.cells.iter().filter(|c| c.value == v).collect();
            let stats = |f: &dyn Fn(&SweepCell) -> Option<f64>| {
                let xs: Option<Vec<f64>> = group.iter().map(|c| f(c)).collect();
                xs.map(|xs| mean_std(&xs))
            };
            let acc = stats(&|c| c.accuracy);
            let ece = stats(&|c| c.ece);
            let nll = stats(&|c| Some(c.nll)).expect("nll always present");
            let r = stats(&|c| Some(c.r_eff as f64)).expect("r_eff always present");
            let secs = stats(&|c| Some(c.seconds)).expect("seconds always present");
            for (label, pick) in [("mean", 0usize), ("std", 1usize)] {
                let get = |s: (f64, f64)| if pick == 0 { s.0 } else { s.1 };
                out += &format!(
                    "{},{},{},{},{},{},{},{}\n",
                    self.kind,
                    v,
                    label,
                    acc.map(|s| get(s).to_string()).unwrap_or_default(),
                    ece.map(|s| get(s).to_string()).unwrap_or_default(),
                    get(nll),
                    get(r),
                    get(secs)
                );
            }
        }
        out
    }
}

fn train_snapshot(cfg: &RunConfig, task: &SyntheticTask) -> Result<BackboneModel> {
    let model = build_model(&cfg.model, task)?;
    Ok(train_with(model, task, &cfg.train, Execution::Sequential, |_| {})?.0)
}

fn total_rank(model: &BackboneModel, tau: f64) -> usize {
    model.effective_ranks(tau).iter().sum()
}

/// Runs one sweep. Cells are independent; `(value, seed)` fully determines
/// each cell, so results do not depend on `exec` apart from timings.
pub fn sweep(kind: SweepKind, grid: &[f64], base: &RunConfig, seeds: &[u64], exec: Execution) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(LrvdError::InvalidArgument("sweep grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(LrvdError::InvalidArgument("sweep needs at least one seed".into()));
    }
    if let Some(bad) = grid.iter().find(|v| !v.is_finite()) {
        return Err(LrvdError::InvalidArgument(format!("grid value {bad} is not finite")));
    }
    let task = SyntheticTask::generate(&base.task)?;
    let bins = base.eval.ece_bins;
    let cells = match kind {
        SweepKind::Beta => {
            if let Some(bad) = grid.iter().find(|&&b| b < 0.0) {
                return Err(LrvdError::InvalidArgument(format!("beta grid value {bad} is negative")));
            }
            let n = grid.len() * seeds.len();
            map_indexed(n, exec, |i| -> Result<SweepCell> {
                let (value, seed) = (grid[i / seeds.len()], seeds[i % seeds.len()]);
                let mut cfg = base.with_seed(seed);
                cfg.train.beta = value;
                let start = Instant::now();
                let model = train_snapshot(&cfg, &task)?;
                let m = evaluate(&model, &task.test, 0, &RngState::new(seed), Execution::Sequential, bins)?;
                Ok(SweepCell {
                    value,
                    seed,
                    accuracy: m.accuracy,
                    ece: m.ece,
                    nll: m.nll,
                    r_eff: total_rank(&model, cfg.train.tau),
                    seconds: start.elapsed().as_secs_f64(),
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?
        }
        SweepKind::Tau => {
            let snapshots = map_indexed(seeds.len(), exec, |i| train_snapshot(&base.with_seed(seeds[i]), &task))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let mut cells = Vec::new();
            for &value in grid {
                for (snap, &seed) in snapshots.iter().zip(seeds) {
                    let start = Instant::now();
                    let r_eff = total_rank(snap, value);
                    let mut pruned = snap.clone();
                    for a in pruned.adapters_mut() {
                        a.prune(value);
                    }
                    let m = evaluate(&pruned, &task.test, 0, &RngState::new(seed), Execution::Sequential, bins)?;
                    cells.push(SweepCell {
                        value,
                        seed,
                        accuracy: m.accuracy,
                        ece: m.ece,
                        nll: m.nll,
                        r_eff,
                        seconds: start.elapsed().as_secs_f64(),
                    });
                }
            }
            cells
        }
        SweepKind::Mc => {
            let ks = grid
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(LrvdError::InvalidArgument(format!("mc grid value {v} is not a sample count")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let snapshots = map_indexed(seeds.len(), exec, |i| train_snapshot(&base.with_seed(seeds[i]), &task))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let mut by_seed = Vec::new();
            // Timed rows run one at a time so wall-clock is not shared.
            for (snap, &seed) in snapshots.iter().zip(seeds) {
                let rows = sample_sweep(snap, &task.test, &ks, &RngState::new(seed), exec, bins)?;
                let r_eff = total_rank(snap, base.train.tau);
                by_seed.push((seed, r_eff, rows));
            }
            let mut cells = Vec::new();
            for (gi, &value) in grid.iter().enumerate() {
                for (seed, r_eff, rows) in &by_seed {
                    let row = &rows[gi];
                    cells.push(SweepCell {
                        value,
                        seed: *seed,
                        accuracy: row.accuracy,
                        ece: row.ece,
                        nll: row.nll,
                        r_eff: *r_eff,
                        seconds: row.seconds,
                    });
                }
            }
            cells
        }
    };
    Ok(SweepTable { kind, cells })
}
