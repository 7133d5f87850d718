//! Config-driven experiments: simulate traces, fit models, score the
//! prediction tasks, run recovery sweeps and summarize fitted parameters.

mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use credence_core::estimator::FitError;
use credence_core::prediction::PredictionError;
use credence_core::simulator::SimError;
use credence_core::{EventError, ParamsError};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "credence",
    version,
    about = "Point-process models of statement additions and evaluations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run config (TOML). Without it every section takes its defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Run seed; overrides the config's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; overrides the config's.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and its ground-truth parameters.
    Simulate,
    /// Fit a model to a trace.
    Fit,
    /// Score a prediction task against its baselines.
    Predict,
    /// Fit nested prefixes of a synthetic corpus and report parameter errors.
    Recover,
    /// Summarize a fitted model.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Recover => "recover",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig { .. } => CliError::Validation(format!("simulate: {e}")),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::InvalidConfig(_)
            | FitError::EmptyTrainingSet
            | FitError::WrongPolarity { .. }
            | FitError::DegenerateFolds { .. } => CliError::Validation(format!("fit: {e}")),
            other => CliError::Runtime(format!("fit: {other}")),
        }
    }
}

impl From<PredictionError> for CliError {
    fn from(e: PredictionError) -> Self {
        match e {
            PredictionError::Fit(f) => f.into(),
            PredictionError::InvalidConfig(_)
            | PredictionError::EmptyTestSet
            | PredictionError::WrongPolarity(_)
            | PredictionError::IndexMismatch(_)
            | PredictionError::Event(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EventError> for CliError {
    fn from(e: EventError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ParamsError> for CliError {
    fn from(e: ParamsError) -> Self {
        CliError::Validation(e.to_string())
    }
}

/// Loads and completes the run config, then executes the command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("reading {}: {e}", path.display())))?;
            let mut cfg = RunConfig::from_toml(&text)?;
            cfg.rebase(path.parent().unwrap_or_else(|| std::path::Path::new(".")));
            cfg
        }
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.apply_seed();

    let level = cfg.log_level.as_deref().unwrap_or("warn");
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(CliError::Validation("threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| commands::dispatch(cli.command, &cfg, &cli.out))
}
