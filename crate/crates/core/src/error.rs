use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row} (line {line}): {message}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        line: u64,
        message: String,
    },

    #[error("malformed manifest {path}: {message}")]
    MalformedManifest { path: PathBuf, message: String },

    #[error("duplicate image_id {0:?}")]
    DuplicateImageId(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("cannot normalize a zero-norm embedding")]
    ZeroNorm,

    #[error("checkpoint version error: {0}")]
    CheckpointVersion(String),

    #[error("checkpoint shape error: {0}")]
    CheckpointShape(String),

    #[error("split {split} would contain no patients ({patients} patients available)")]
    EmptySplit { split: &'static str, patients: usize },

    #[error("no positive pair available: every patient has a single record")]
    NoPositivePair,

    #[error("need at least two distinct patients, found {0}")]
    TooFewPatients(usize),

    #[error("insufficient {kind} pairs: requested {requested}, only {available} eligible")]
    InsufficientPairs {
        kind: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("unknown attribute {name:?}; available attributes: [{}]", available.join(", "))]
    UnknownAttribute { name: String, available: Vec<String> },

    #[error("scores contain a single class: {positives} positives, {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("index {index} out of range for dataset of {len} records")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a short description of what was being attempted.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
