use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use lrvd::checkpoint::{load_checkpoint, save_checkpoint};
use lrvd::diagnostics::{gauge_ordering_experiment, sweep as run_sweep, theorem_suite, GaugeRow, SweepKind, TheoremSuiteConfig};
use lrvd::evaluator::{sample_sweep, SweepRow};
use lrvd::model::build_model;
use lrvd::numerics::RngState;
use lrvd::parallel::Execution;
use lrvd::task::SyntheticTask;
use lrvd::trainer::train_with;
use lrvd::LrvdError;
use serde_json::json;

use crate::output::{self, load_config, parse_grid, parse_k_list, parse_seeds, prepare_out, write, write_json};

/// A check ran to completion and reported numeric failures.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

pub fn train(config: &Path, out: &Path, seed: Option<u64>, quiet: bool) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.resolved = cfg.resolved.with_seed(s);
    }
    prepare_out(out)?;
    let run = &cfg.resolved;
    let start = Instant::now();
    let task = SyntheticTask::generate(&run.task).context("cannot generate task")?;
    let model = build_model(&run.model, &task).context("cannot build model")?;
    let (model, record) = train_with(model, &task, &run.train, Execution::Parallel, |row| {
        if !quiet {
            eprintln!(
                "step {:>6}  loss {:.5}  kl {:.3}  r_eff {:?}  val_nll {:.4}",
                row.step, row.train_loss, row.kl_sum, row.effective_rank, row.val.nll
            );
        }
    })?;
    let seconds = start.elapsed().as_secs_f64();
    save_checkpoint(&model, out.join("checkpoint.json"))?;
    write(out, "run.jsonl", &record.to_jsonl())?;
    let final_row = record.last();
    let summary = output::summary(
        "train",
        Some(&cfg),
        json!({
            "final": final_row,
            "effective_rank": model.effective_ranks(run.train.tau),
            "active_ranks": model.adapters().map(|a| a.n_active()).collect::<Vec<_>>(),
            "parameter_count": model.parameter_count(),
            "seconds": seconds,
        }),
    );
    write_json(out, "summary.json", &summary)?;
    if !quiet {
        eprintln!("wrote {} in {seconds:.2}s", out.display());
    }
    Ok(())
}

pub fn eval(checkpoint: &Path, config: &Path, out: &Path, k: Option<&str>, seed: Option<u64>, quiet: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let ks = match k {
        Some(spec) => parse_k_list(spec)?,
        None => cfg.resolved.eval.k_list.clone(),
    };
    let model = load_checkpoint(checkpoint).with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    let task = SyntheticTask::generate(&cfg.resolved.task).context("cannot generate task")?;
    if model.d_in() != task.d_in || model.d_out() != task.d_out {
        bail!(LrvdError::Shape {
            op: "eval",
            detail: format!(
                "checkpoint is {}->{}, task is {}->{}",
                model.d_in(),
                model.d_out(),
                task.d_in,
                task.d_out
            ),
        });
    }
    prepare_out(out)?;
    let seed = seed.unwrap_or(cfg.resolved.train.seed);
    let rows = sample_sweep(
        &model,
        &task.test,
        &ks,
        &RngState::new(seed),
        Execution::Parallel,
        cfg.resolved.eval.ece_bins,
    )?;
    let mut csv = String::from(SweepRow::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv += &r.to_csv();
        csv.push('\n');
    }
    write(out, "metrics.csv", &csv)?;
    let summary = output::summary(
        "eval",
        Some(&cfg),
        json!({ "checkpoint": checkpoint.display().to_string(), "seed": seed, "rows": rows }),
    );
    write_json(out, "summary.json", &summary)?;
    if !quiet {
        eprint!("{csv}");
    }
    Ok(())
}

pub fn diagnose(
    suite: bool,
    checkpoint: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    n_random: usize,
    quiet: bool,
) -> Result<()> {
    prepare_out(out)?;
    let seed = seed.unwrap_or(0);
    if suite {
        let cfg = TheoremSuiteConfig {
            seed,
            ..TheoremSuiteConfig::default()
        };
        let report = theorem_suite(&cfg, Execution::Parallel)?;
        let mut value = serde_json::to_value(&report)?;
        value["version"] = json!(lrvd::config::VERSION);
        write_json(out, "symmetry_report.json", &value)?;
        if !quiet {
            for s in &report.sections {
                eprintln!(
                    "{:<22} probes {:>4}  failures {}  errors {}  extreme {:.3e}",
                    s.name, s.probes, s.failures, s.errors, s.extreme_deviation
                );
            }
        }
        if !report.passed {
            bail!(NumericFailure(format!("symmetry suite reported {} failures", report.failures)));
        }
        return Ok(());
    }
    let Some(path) = checkpoint else {
        bail!("diagnose needs --theorem-suite or --checkpoint");
    };
    let model = load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    let adapters: Vec<_> = model.adapters().cloned().collect();
    if adapters.is_empty() {
        bail!(LrvdError::InvalidArgument("checkpoint has no adapters".into()));
    }
    let report = gauge_ordering_experiment(&adapters, n_random, &RngState::new(seed), Execution::Parallel)
        .context("energy curves failed")?;
    let mut curves = String::from(GaugeRow::CURVE_CSV_HEADER);
    curves.push('\n');
    let mut aucs = String::from(GaugeRow::CSV_HEADER);
    aucs.push('\n');
    for row in &report.rows {
        for line in row.curve_csv_lines() {
            curves += &line;
            curves.push('\n');
        }
        aucs += &row.to_csv();
        aucs.push('\n');
    }
    write(out, "energy_curves.csv", &curves)?;
    write(out, "auc_summary.csv", &aucs)?;
    let summary = output::summary(
        "diagnose",
        None,
        json!({
            "checkpoint": path.display().to_string(),
            "seed": seed,
            "n_random": n_random,
            "skipped": report.skipped,
        }),
    );
    write_json(out, "summary.json", &summary)?;
    if !quiet {
        for (_, why) in &report.skipped {
            eprintln!("skipped: {why}");
        }
        eprint!("{aucs}");
    }
    Ok(())
}

pub fn sweep(
    kind: &str,
    grid: &str,
    config: &Path,
    out: &Path,
    seeds: &str,
    seed: Option<u64>,
    quiet: bool,
) -> Result<()> {
    let kind: SweepKind = kind.parse()?;
    let grid = parse_grid(grid)?;
    let seeds = match seed {
        Some(s) => vec![s],
        None => parse_seeds(seeds)?,
    };
    let cfg = load_config(config)?;
    prepare_out(out)?;
    let start = Instant::now();
    let table = run_sweep(kind, &grid, &cfg.resolved, &seeds, Execution::Parallel)?;
    let csv = table.to_csv();
    write(out, "sweep.csv", &csv)?;
    let summary = output::summary(
        "sweep",
        Some(&cfg),
        json!({
            "kind": kind,
            "grid": grid,
            "seeds": seeds,
            "seconds": start.elapsed().as_secs_f64(),
        }),
    );
    write_json(out, "summary.json", &summary)?;
    if !quiet {
        eprint!("{csv}");
    }
    Ok(())
}
