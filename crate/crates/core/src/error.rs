use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {reason}")]
    MalformedFile {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("inconsistent vector dimension at record {record}: expected {expected}, got {actual}")]
    InconsistentDimension {
        record: usize,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("search space is empty")]
    EmptySpace,

    #[error("no perturbation function enabled")]
    NoFunctionEnabled,

    #[error("input sequence is empty")]
    EmptyInput,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("malformed probability distribution at sentence {index}: {reason}")]
    MalformedDistribution { index: usize, reason: String },

    #[error("objective needs at least two classes")]
    SingleClass,

    #[error("position {position}: {reason}")]
    MaskSpaceConflict { position: usize, reason: String },

    #[error("target class {0} equals the ground-truth label")]
    TargetEqualsTruth(usize),

    #[error("record {0} has no target label")]
    MissingTarget(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

impl Error {
    pub(crate) fn malformed(path: impl Into<PathBuf>, line: usize, reason: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: path.into(),
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
