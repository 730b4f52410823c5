//! `xcnn`: train, evaluate, and explain small image classifiers from the
//! command line. Every command takes a flat `key = value` config file plus a
//! run directory; given the same config and seed, reruns reproduce the
//! primary artifacts byte for byte.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::CliError;

#[derive(Parser)]
#[command(name = "xcnn", version, about = "explainable CNN training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write curves.csv plus the best checkpoint.
    Train {
        /// Path to the run config file.
        #[arg(long)]
        config: PathBuf,
        /// Run directory for artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score the held-out test split and write metrics/confusion/ROC tables.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to score (default: <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attribute one prediction to image regions and render a heatmap.
    Explain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image to explain.
        #[arg(long)]
        image: PathBuf,
        /// Class index, class name, or "predicted".
        #[arg(long, default_value = "predicted")]
        target_class: String,
        /// Override the config segmentation grid.
        #[arg(long)]
        grid: Option<usize>,
        /// Override the config evaluation budget.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a run directory into report.md.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out, seed } => commands::train::run(&config, &out, seed),
        Command::Evaluate {
            config,
            out,
            checkpoint,
            seed,
        } => commands::evaluate::run(&config, &out, checkpoint.as_deref(), seed),
        Command::Explain {
            config,
            out,
            checkpoint,
            image,
            target_class,
            grid,
            budget,
            seed,
        } => commands::explain::run(
            &config,
            &out,
            checkpoint.as_deref(),
            &image,
            &target_class,
            grid,
            budget,
            seed,
        ),
        Command::Report { out } => commands::report::run(&out),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
