//! `subtrans` command-line front end.

mod commands;

use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "subtrans", version, about = "Transport-weighted subgroup analysis of two-arm trials")]
struct Cli {
    /// Worker threads (default: available parallelism). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<NonZeroUsize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the five analyses with bootstrap intervals and write a report.
    Analyze(AnalyzeArgs),
    /// Fit the membership model and write the covariate balance table only.
    Balance(DataArgs),
    /// Monte Carlo evaluation of the analyses on synthetic scenarios.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Trial CSV, one row per patient.
    #[arg(long)]
    pub input: PathBuf,
    /// JSON file with `covariates` and optional `columns` / `model_covariates`.
    #[arg(long)]
    pub spec: PathBuf,
    /// Column identifying the subgroup (overrides the spec file).
    #[arg(long)]
    pub target_column: Option<String>,
    /// Value of the target column that marks a subgroup member. Without it
    /// the column is read as 0/1.
    #[arg(long)]
    pub target_level: Option<String>,
    /// Cap on non-member odds weights.
    #[arg(long)]
    pub weight_cap: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "subtrans-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 365.0)]
    pub horizon_days: f64,
    #[arg(long, default_value_t = 2000)]
    pub n_bootstrap: usize,
    /// Bootstrap seed.
    #[arg(long, required = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Scenario JSON file(s).
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub replicates: usize,
    #[arg(long, default_value_t = 365.0)]
    pub horizon_days: f64,
    #[arg(long, default_value_t = 2000)]
    pub n_bootstrap: usize,
    /// Root seed; replaces the seed stored in each scenario file.
    #[arg(long, required = true)]
    pub seed: Option<u64>,
    /// Output directory; each scenario writes into a subdirectory named after it.
    #[arg(long, default_value = "subtrans-out")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::thread::available_parallelism().ok())
        .map_or(1, NonZeroUsize::get);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {threads} worker threads: {e}");
            return ExitCode::from(1);
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Analyze(a) => commands::analyze(a),
        Command::Balance(a) => commands::balance(a),
        Command::Simulate(a) => commands::simulate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code())
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(msg) => write!(f, "error [usage]: {msg}"),
            Failure::Lib { module, error, hint } => {
                write!(f, "error [{module}]: {error}")?;
                if !hint.is_empty() {
                    write!(f, "\nhint: {hint}")?;
                }
                Ok(())
            }
            Failure::PartialEstimation(msg) => write!(f, "error [estimator]: {msg}"),
        }
    }
}
