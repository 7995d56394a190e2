//! `ftx`: prepare data, train, evaluate and ablate the forecaster.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ftx", version, about = "Hourly emissions forecasting with exogenous drivers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `model.d_model=32` or `p=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Training seed (the generator seed for `synth`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to the config's `out_dir`, then
    /// `$FTX_OUT_DIR/<command>`, then `runs/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset, its manifest and a ground-truth sidecar.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and save its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on the data described by a run config.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate. Without `--config`, the resolved config
        /// stored next to it is used.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Also write an SVG of truth against prediction.
        #[arg(long)]
        plot: bool,
    },
    /// Train and score every ablation cell for each seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds, e.g. `0,1,2`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Add a baseline that also drops the frequency branch.
        #[arg(long)]
        with_no_freq: bool,
    },
    /// Train a robust and a plain model and compare them under damaged
    /// exogenous inputs.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        plot: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { common } => commands::synth(&common),
        Command::Train { common } => commands::train(&common),
        Command::Eval {
            common,
            checkpoint,
            split,
            plot,
        } => commands::eval(&common, &checkpoint, split, plot),
        Command::Ablate {
            common,
            seeds,
            with_no_freq,
        } => commands::ablate(&common, seeds, with_no_freq),
        Command::Robustness { common, plot } => commands::robustness(&common, plot),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
