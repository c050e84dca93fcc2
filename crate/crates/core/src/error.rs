use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("feature `{name}` = {value} is outside its valid range {range}")]
    FeatureOutOfRange {
        name: String,
        value: f64,
        range: &'static str,
    },

    #[error("invalid system configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("eigenvalue iteration did not converge after {iterations} QR sweeps")]
    NonConvergence { iterations: usize },

    #[error("eigenvector computation failed for mode {mode}: {reason}")]
    EigenvectorFailure { mode: usize, reason: String },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("point lies outside the training hull on feature `{feature}` ({value} not in [{lo}, {hi}])")]
    OutsideHull {
        feature: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("incomplete grid: {0}")]
    IncompleteGrid(String),

    #[error("manifest mismatch in {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("malformed CSV {path}: {reason}")]
    MalformedCsv { path: PathBuf, reason: String },

    #[error("missing input file {0}")]
    MissingFile(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("grid point {index} ({point}): {source}")]
    AtPoint {
        index: usize,
        point: String,
        #[source]
        source: Box<Error>,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
