//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed reference segment: {0}")]
    MalformedReference(String),

    #[error("non-monotonic timestamps: {0}")]
    NonMonotonicTime(String),

    #[error("cell '{cell_id}' has {count} reference events; at least 2 are required to segment load patterns")]
    InsufficientReferences { cell_id: String, count: usize },

    #[error("cannot parse a numeric identifier from cell id '{0}'")]
    IdParse(String),

    #[error("cell '{cell_id}' failed validation: {issues:?}")]
    InvalidCell { cell_id: String, issues: Vec<String> },

    #[error("load pattern {cell_id}#{index} has no samples but the feature spec requires series data")]
    EmptyPattern { cell_id: String, index: usize },

    #[error("no usable training rows: {0}")]
    EmptyDataset(String),

    #[error("invalid configuration: {0}")]
    Configuration(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("covariance matrix not positive definite after jitter up to {max_jitter:.3e}")]
    Conditioning { max_jitter: f64 },

    #[error("hyperparameter optimization failed: {0}")]
    OptimizationFailed(String),

    #[error("model/data incompatibility: {0}")]
    Incompatibility(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("vectors have different lengths: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("empty output: {0}")]
    EmptyOutput(String),

    #[error("serialized model is corrupt: {0}")]
    ModelLoad(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
