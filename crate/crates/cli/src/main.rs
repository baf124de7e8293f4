//! `ahstn` command-line tool.

mod commands;
mod output;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ahstn::model::Variant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "ahstn", version, about = "Hierarchical spatio-temporal traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every command.
#[derive(Args, Debug, Clone, Default)]
pub struct Shared {
    /// Configuration file (`key = value` lines with sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Model variant: full, no-skip or no-hierarchy.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Also report the historical-average and last-value baselines.
    #[arg(long)]
    pub with_baselines: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with ground-truth clusters.
    Synth {
        #[command(flatten)]
        shared: Shared,
    },
    /// Train a model, then write checkpoint, history, report and assignment.
    Train {
        #[command(flatten)]
        shared: Shared,
    },
    /// Score a checkpoint on one split of a dataset.
    Evaluate {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Series CSV; defaults to the one named in the config.
        #[arg(long)]
        series: Option<PathBuf>,
        /// Which chronological split to score: train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Forecast the next horizon from one input window.
    Predict {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Series CSV holding exactly the input window.
        #[arg(long)]
        input: PathBuf,
    },
    /// Export the stored cluster assignment of a checkpoint.
    InspectClusters {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ground-truth `node,cluster` labels for a purity score.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Train one model per clustering ratio and tabulate test errors.
    SweepPcluster {
        #[command(flatten)]
        shared: Shared,
        /// Comma-separated ratios; defaults to `[sweep] ratios` in the config.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { shared } => commands::synth(&shared),
        Command::Train { shared } => commands::train(&shared),
        Command::Evaluate {
            shared,
            checkpoint,
            series,
            split,
        } => commands::evaluate_cmd(&shared, &checkpoint, series.as_deref(), &split),
        Command::Predict {
            shared,
            checkpoint,
            input,
        } => commands::predict(&shared, &checkpoint, &input),
        Command::InspectClusters {
            shared,
            checkpoint,
            labels,
        } => commands::inspect_clusters(&shared, &checkpoint, labels.as_deref()),
        Command::SweepPcluster { shared, ratios } => commands::sweep(&shared, ratios),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
