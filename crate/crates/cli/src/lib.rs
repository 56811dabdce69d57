//! Command-line harness: ingestion, training, evaluation, diagnostics,
//! ablation sweeps, the augmentation benchmark and gradient verification.
//!
//! Every command reads one JSON [`config::ExperimentConfig`], writes its
//! outputs under the configured output directory and maps failures to the
//! exit codes of [`error::CliError`].

pub mod commands;
pub mod config;
pub mod error;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

pub use commands::{
    cmd_bench_aug, cmd_diagnose, cmd_eval, cmd_gradcheck, cmd_ingest, cmd_sweep, cmd_train,
};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "btsf", version, about = "Temporal-spectral contrastive representation learning for time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate and normalize a dataset; print a summary.
    Ingest(IngestArgs),
    /// Train a model and write checkpoints plus the loss curve.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a downstream task.
    Eval(EvalArgs),
    /// Alignment, uniformity and false-prediction overlap of a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Train one model per parameter value and probe each.
    Sweep(SweepArgs),
    /// Compare view-generating augmentations by probe accuracy.
    BenchAug(BenchAugArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

/// Options shared by every config-driven command.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config leaf by dotted path, e.g. `--set fusion.loops=1`.
    /// Values are parsed as JSON, falling back to a string.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for the processed CSV, manifest and statistics.
    #[arg(long, default_value = "ingested")]
    pub out: PathBuf,
    /// Keep raw values instead of z-scoring with training-split statistics.
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total epochs override.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint until the configured epoch count.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Classify,
    Forecast,
    Anomaly,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Forecast => "forecast",
            Task::Anomaly => "anomaly",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ThresholdArg {
    BestF1,
    Fixed,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub task: Task,
    /// Anomaly threshold policy; defaults to the config's.
    #[arg(long, value_enum)]
    pub threshold_policy: Option<ThresholdArg>,
    /// Threshold for `--threshold-policy fixed`.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Forecast horizons, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SweepParam {
    DropoutRate,
    Temperature,
    Loops,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::DropoutRate => "dropout_rate",
            SweepParam::Temperature => "temperature",
            SweepParam::Loops => "loops",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Values to try, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchAugArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Seeds per policy, starting at the config seed.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Experiment configuration; a built-in model with m=n=4, d=4, l=2 on a
    /// small synthetic batch when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// File for the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
