//! `csp`: train, evaluate and analyse sparse recurrent models.

mod analysis;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::ConfigError;

#[derive(Parser)]
#[command(name = "csp", version, about = "Sparse-aware LSTM training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoint and sparse export.
    Train { config: PathBuf },
    /// Evaluation loss of a checkpoint on the config's held-out split.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Per-kernel |w| histograms of a checkpoint as CSV.
    Histogram {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Degradation of each run relative to a dense baseline run.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long, default_value = "compare.csv")]
        out: PathBuf,
    },
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<csp_core::Error>() {
        Some(csp_core::Error::NonFinite { .. }) => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CSP_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => run::train(&config),
        Command::Eval { checkpoint, config } => run::eval(&checkpoint, &config),
        Command::Histogram { checkpoint, bins, out } => run::histogram(&checkpoint, bins, &out),
        Command::Compare { runs, baseline, out } => run::compare(&runs, &baseline, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
