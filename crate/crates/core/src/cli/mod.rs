//! Command-line interface: `simulate`, `fit`, `predict` and `cav-recipe`.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 the fit
//! stopped without converging (outputs are still written).

pub mod cav;
pub mod commands;
pub mod config;
pub mod data;
pub mod fitfile;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::estimator::EstimationError;
use crate::inference::InferenceError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("writing output: {0}")]
    Output(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn csv(e: csv::Error) -> Self {
        CliError::Output(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Io { .. } => 2,
            CliError::Output(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        match e {
            EstimationError::Options(m) => CliError::Validation(m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Request(m) => CliError::Validation(m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

pub const EXIT_NOT_CONVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "msmspline",
    version,
    about = "Spline-hazard multistate models for panel data"
)]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate illness-death panel data and the true transition probabilities.
    Simulate(SimulateArgs),
    /// Fit a model to panel data.
    Fit(FitArgs),
    /// Predict from a fitted model with simulation-based intervals.
    Predict(PredictArgs),
    /// Convert the heart-transplant CAV data to the ingest format.
    CavRecipe(CavArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Model configuration; the `[simulation]` table sets the scenario.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for data.csv and truth.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of individuals.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub t0: f64,
    #[arg(long, default_value_t = 10.0)]
    pub t1: f64,
    /// Monte-Carlo paths per starting state for truth.csv; 0 skips it.
    #[arg(long, default_value_t = crate::simulate::TRUTH_PATHS)]
    pub truth_paths: usize,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Likelihood grid width, overriding the config.
    #[arg(long)]
    pub grid_width: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// fit.json written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[command(subcommand)]
    pub kind: PredictKind,
}

#[derive(Debug, Subcommand)]
pub enum PredictKind {
    /// Transition probability matrix P(t0, t1).
    Matrix(MatrixArgs),
    /// Hazard curves of the spline transitions.
    Curve(CurveArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PredictCommon {
    /// Covariate value, `name=value`; every model covariate is required.
    #[arg(long = "x", value_name = "NAME=VALUE")]
    pub x: Vec<String>,
    #[arg(long)]
    pub nsims: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[arg(long)]
    pub t0: f64,
    #[arg(long)]
    pub t1: f64,
    /// Sub-interval width for piecewise-constant hazards; defaults to the
    /// span the fit held hazards constant over.
    #[arg(long)]
    pub grid_width: Option<f64>,
    #[command(flatten)]
    pub common: PredictCommon,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    /// Transition as `from-to` (1-based); all spline transitions when omitted.
    #[arg(long)]
    pub transition: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub from_time: f64,
    /// Curve end; the last knot when omitted.
    #[arg(long)]
    pub to_time: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[command(flatten)]
    pub common: PredictCommon,
}

#[derive(Debug, Args)]
pub struct CavArgs {
    /// The `cav` table exported to CSV.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Source column for the state: `statemax` or `state`.
    #[arg(long, default_value = "statemax")]
    pub state_column: String,
    /// Also write a matching model configuration.
    #[arg(long)]
    pub config_out: Option<PathBuf>,
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a).map(|_| 0),
        Command::Fit(a) => commands::fit(&a).map(|outcome| {
            if outcome.converged {
                0
            } else {
                EXIT_NOT_CONVERGED
            }
        }),
        Command::Predict(a) => commands::predict(&a).map(|_| 0),
        Command::CavRecipe(a) => commands::cav_recipe(&a).map(|_| 0),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
