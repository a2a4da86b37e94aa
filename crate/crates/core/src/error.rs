use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("parameter index {index} out of range for {len} parameters")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),

    #[error("non-finite loss ({value}) at theta of length {}", theta.len())]
    NonFiniteLoss { value: f64, theta: Vec<f64> },

    #[error("optimizer diverged at iteration {iteration}: objective {value}")]
    Diverged { iteration: usize, value: f64 },

    #[error("unknown layer designator: {0}")]
    UnknownLayer(String),

    #[error("k = {k} out of range 1..={len}")]
    KOutOfRange { k: usize, len: usize },

    #[error("stochastic subset is empty: {0}")]
    EmptyStochasticSet(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("matrix factorization failed after {attempts} jitter attempts")]
    Factorization { attempts: usize },

    #[error("empty dataset: {0}")]
    EmptyData(&'static str),

    #[error("wrong task: {0}")]
    WrongTask(&'static str),

    #[error("≥2 chains required, got {0}")]
    TooFewChains(usize),

    #[error("width constraint violated for architecture [{tag}]: {constraint}")]
    WidthConstraint { tag: char, constraint: String },

    #[error("non-numeric cell at row {row}, column {col}: {value:?}")]
    NonNumericCell { row: usize, col: usize, value: String },

    #[error("ragged CSV: row {row} has {found} fields, header has {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("column {0:?} not found in CSV header")]
    MissingColumn(String),

    #[error("malformed blob {path:?}: {reason}")]
    MalformedBlob { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }
}
