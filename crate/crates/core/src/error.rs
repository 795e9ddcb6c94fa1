use std::collections::BTreeMap;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse grouping used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Model,
    Estimation,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid covariate spec: {0}")]
    InvalidSpec(String),

    #[error("schema error: missing column `{column}`")]
    MissingColumn { column: String },

    #[error("line {line}: column `{column}`: cannot parse `{value}` ({reason})")]
    Parse {
        line: u64,
        column: String,
        value: String,
        reason: String,
    },

    #[error("line {line}: column `{column}`: unknown level `{value}`")]
    UnknownLevel {
        line: u64,
        column: String,
        value: String,
    },

    #[error("dataset has no complete rows")]
    EmptyDataset,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("design is rank deficient; dependent columns: {}", columns.join(", "))]
    Collinearity { columns: Vec<String> },

    #[error("separation detected at iteration {iteration}: {detail}")]
    Separation { iteration: usize, detail: String },

    #[error("logistic fit did not converge in {iterations} iterations (max |score| per iteration: {trace:?})")]
    NonConvergence { iterations: usize, trace: Vec<f64> },

    #[error("non-member record {record} has fitted membership probability {prob} (odds weight overflow)")]
    WeightOverflow { record: String, prob: f64 },

    #[error("degenerate cohort: {0}")]
    DegenerateCohort(String),

    #[error("survival undefined at horizon {horizon} (max follow-up {max_followup}, survival still {survival})")]
    UndefinedTail {
        horizon: f64,
        max_followup: f64,
        survival: f64,
    },

    #[error("unstable bootstrap: {failed} of {total} iterations failed ({breakdown:?})")]
    UnstableBootstrap {
        failed: usize,
        total: usize,
        breakdown: BTreeMap<String, usize>,
    },

    #[error("unstable Monte Carlo run: {failed} of {total} replicates failed ({breakdown:?})")]
    UnstableMonteCarlo {
        failed: usize,
        total: usize,
        breakdown: BTreeMap<String, usize>,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid variance: {0}")]
    InvalidVariance(String),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            Config(_) | InvalidSpec(_) => ErrorCategory::Config,
            Io { .. } | Csv(_) | Json(_) | MissingColumn { .. } | Parse { .. }
            | UnknownLevel { .. } | EmptyDataset | InvalidDataset(_) => ErrorCategory::Data,
            Collinearity { .. } | Separation { .. } | NonConvergence { .. }
            | WeightOverflow { .. } => ErrorCategory::Model,
            DegenerateCohort(_) | UndefinedTail { .. } | UnstableBootstrap { .. }
            | UnstableMonteCarlo { .. } | EmptyInput(_) | InvalidVariance(_) => {
                ErrorCategory::Estimation
            }
        }
    }

    /// Short stable tag, used for failure breakdowns.
    pub fn tag(&self) -> &'static str {
        use Error::*;
        match self {
            Io { .. } => "io",
            Csv(_) => "csv",
            Json(_) => "json",
            InvalidSpec(_) => "invalid_spec",
            MissingColumn { .. } => "missing_column",
            Parse { .. } => "parse",
            UnknownLevel { .. } => "unknown_level",
            EmptyDataset => "empty_dataset",
            InvalidDataset(_) => "invalid_dataset",
            Config(_) => "config",
            Collinearity { .. } => "collinearity",
            Separation { .. } => "separation",
            NonConvergence { .. } => "nonconvergence",
            WeightOverflow { .. } => "weight_overflow",
            DegenerateCohort(_) => "degenerate_cohort",
            UndefinedTail { .. } => "undefined_tail",
            UnstableBootstrap { .. } => "unstable_bootstrap",
            UnstableMonteCarlo { .. } => "unstable_monte_carlo",
            EmptyInput(_) => "empty_input",
            InvalidVariance(_) => "invalid_variance",
        }
    }
}
