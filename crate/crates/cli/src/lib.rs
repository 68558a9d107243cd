//! Command-line driver: training, evaluation, prediction, graph statistics,
//! per-code explanations, synthetic data and gradient checks.

pub mod bundle;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] corelation::Error),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    NotSelected(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::NotSelected(_) => "not-selected",
            CliError::CheckFailed(_) => "check-failed",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "corelation", version, about = "Contextualized ICD code prediction with per-note relation graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset (JSON lines with `id`, `text`, `codes`).
    #[arg(long)]
    pub data: PathBuf,
    /// Lower nodes per note; defaults to the value stored in the checkpoint.
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub no_relation: bool,
    #[arg(long)]
    pub no_context: bool,
    #[arg(long)]
    pub no_saa: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes the checkpoint, history, log and effective config.
    Train(ConfigArgs),
    /// Print metrics of a checkpoint on a dataset, or of a predictions file.
    Evaluate {
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Output of `predict` to score instead of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        no_relation: bool,
        #[arg(long)]
        no_context: bool,
        #[arg(long)]
        no_saa: bool,
        /// Also write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write ranked codes with probabilities for every note.
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        /// JSON lines output; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Keep only the best `n` codes per note.
        #[arg(long)]
        top: Option<usize>,
    },
    /// Relation-graph size, edge-type histogram and edge memory for one note.
    GraphStats {
        #[command(flatten)]
        model: ModelArgs,
        /// Note id; the first note when absent.
        #[arg(long)]
        note: Option<String>,
    },
    /// Majors a code attends to most in the relation graph of one note.
    Explain {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        note: String,
        #[arg(long)]
        code: String,
    },
    /// Generate a synthetic corpus with ontology and descriptions.
    GenData {
        /// JSON generator settings; defaults when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic and finite-difference gradients on a micro model.
    GradCheck {
        /// Check a single linear layer instead of the whole pipeline.
        #[arg(long)]
        linear: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates to probe.
        #[arg(long, default_value_t = 600)]
        coords: usize,
    },
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    commands::dispatch(cli.command, out)
}
