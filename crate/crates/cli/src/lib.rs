//! `rr`: batch driver for rehearsal experiments.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or manifest error.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "RR_OUTPUT_ROOT";

/// A failure, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<rr_core::Error> for CliError {
    fn from(e: rr_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "rr", version, about = "Class-incremental rehearsal experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every strategy and seed of a manifest.
    Run(RunArgs),
    /// Repeat a run over memory sizes or task counts.
    Sweep(SweepArgs),
    /// Distill robust samples for one class from a checkpoint.
    Distill(DistillArgs),
    /// Accuracy of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write a memory snapshot out as images.
    Export(ExportArgs),
}

/// Overrides shared by `run` and `sweep`; each mirrors a manifest field.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// Output directory (manifest `output`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds (manifest `seeds`).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Comma-separated strategies (manifest `strategies`).
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<String>>,
    /// Total exemplar budget (manifest `memory.budget`).
    #[arg(long)]
    pub budget: Option<usize>,
    /// Robust samples per class (manifest `memory.k_clr`).
    #[arg(long)]
    pub k_clr: Option<usize>,
    /// Epochs for the first task (manifest `train.epochs_first`).
    #[arg(long)]
    pub epochs_first: Option<usize>,
    /// Epochs for later tasks (manifest `train.epochs_rest`).
    #[arg(long)]
    pub epochs_rest: Option<usize>,
    /// Distillation steps (manifest `distill.steps`).
    #[arg(long)]
    pub distill_steps: Option<usize>,
    /// Do not write checkpoints, memory snapshots or images.
    #[arg(long)]
    pub no_artifacts: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub manifest: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Memory,
    Tasks,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Memory => "memory",
            Axis::Tasks => "tasks",
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values of the swept quantity.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub values: Vec<usize>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Manifest whose dataset section describes the data.
    #[arg(long, conflicts_with = "data")]
    pub manifest: Option<PathBuf>,
    /// Dataset directory with labels.csv.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Class to distill for.
    #[arg(long)]
    pub class: usize,
    /// Number of robust samples (targets are the first `k` train samples of the class).
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Write an image every this many steps; 0 disables snapshots.
    #[arg(long, default_value_t = 0)]
    pub snapshot_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Restrict to these classes (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Memory snapshot directory.
    #[arg(long)]
    pub memory: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
