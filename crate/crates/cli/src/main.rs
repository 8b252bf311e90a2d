//! `lrvd`: train, evaluate and diagnose rank-tied variational adapters on
//! synthetic tasks.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric
//! failure.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lrvd::LrvdError;

#[derive(Parser, Debug)]
#[command(name = "lrvd", version, about = "Rank-tied variational dropout for low-rank adapters")]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint.json, run.jsonl and summary.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the model and training seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the config's test split; writes metrics.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated MC sample counts; defaults to eval.k_list.
        #[arg(long)]
        k: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the symmetry suite, or energy curves for a checkpoint.
    Diagnose {
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        theorem_suite: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Random orderings per adapter.
        #[arg(long, default_value_t = 20)]
        n_random: usize,
    },
    /// Sweep β, τ or MC sample count; writes sweep.csv.
    Sweep {
        #[arg(long)]
        kind: String,
        /// Comma list (`1e-4,1e-3`) or inclusive integer range (`1..8`).
        #[arg(long)]
        grid: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// Single seed; shorthand for `--seeds N`.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|c| c.is::<commands::NumericFailure>()) {
        return 3;
    }
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<LrvdError>()) else {
        return 2;
    };
    match e {
        LrvdError::NonFinite { .. } | LrvdError::Singular(_) | LrvdError::SvdNoConvergence { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = cli.quiet;
    let result = match cli.command {
        Command::Train { config, out, seed } => commands::train(&config, &out, seed, quiet),
        Command::Eval {
            checkpoint,
            config,
            out,
            k,
            seed,
        } => commands::eval(&checkpoint, &config, &out, k.as_deref(), seed, quiet),
        Command::Diagnose {
            theorem_suite,
            checkpoint,
            out,
            seed,
            n_random,
        } => commands::diagnose(theorem_suite, checkpoint.as_deref(), &out, seed, n_random, quiet),
        Command::Sweep {
            kind,
            grid,
            config,
            out,
            seeds,
            seed,
        } => commands::sweep(&kind, &grid, &config, &out, &seeds, seed, quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
