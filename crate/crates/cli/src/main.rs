//! Command-line runner for training, evaluation and the figure sweeps.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ibnn::ErrorKind;

use config::Preset;

#[derive(Debug, Parser)]
#[command(name = "ibnn", version, about = "Implicitly Bayesian neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a per-epoch log.
    Train(Common),
    /// Score a checkpoint: metrics JSON, reliability CSV, prediction dump.
    Evaluate(Common),
    /// Train both methods at depths 1..5 on the cubic task.
    DepthSweep(Common),
    /// Train both methods at growing widths on an image task.
    WidthSweep(Common),
    /// Entropy of a trained classifier under increasing input corruption.
    CorruptEval(Common),
    /// Per-component implicit weights of a checkpoint, one CSV row each.
    ExportWeights(Common),
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in experiment used when no config file is given.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Directory holding IDX or CSV inputs.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Where outputs are written; created if missing.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Overrides the seed of the experiment.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to read (evaluate, corrupt-eval, export-weights) or write (train).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => commands::train(c),
        Command::Evaluate(c) => commands::evaluate(c),
        Command::DepthSweep(c) => commands::depth_sweep(c),
        Command::WidthSweep(c) => commands::width_sweep(c),
        Command::CorruptEval(c) => commands::corrupt_eval(c),
        Command::ExportWeights(c) => commands::export_weights(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}
