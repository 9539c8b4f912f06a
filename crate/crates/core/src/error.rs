use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Invalid arguments, recipe or configuration values.
    Usage,
    /// Unreadable, malformed or mutually inconsistent input data.
    Data,
    /// Non-finite values or diverging training.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("parameter set is empty")]
    EmptyParamSet,

    #[error("invalid parameter name {0:?}")]
    InvalidName(String),

    #[error("parameter {0:?} is missing from the base checkpoint")]
    MissingParameter(String),

    #[error("delta parameter {0:?} does not exist in the target parameter set")]
    UnknownParameter(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("duplicate tensor name {0:?} in checkpoint header")]
    DuplicateName(String),

    #[error("drop probability must lie in [0, 1), got {0}")]
    InvalidProbability(f64),

    #[error("density must lie in (0, 1], got {0}")]
    InvalidDensity(f64),

    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),

    #[error("interpolation factor must lie in [0, 1], got {0}")]
    InvalidInterpolation(f64),

    #[error("unsupported merge method {0:?}")]
    UnsupportedMethod(String),

    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),

    #[error("merge weights sum to zero and cannot be normalized")]
    ZeroWeightSum,

    #[error("batch is empty")]
    EmptyBatch,

    #[error("evaluation suite list is empty")]
    EmptySuite,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            InvalidProbability(_)
            | InvalidDensity(_)
            | InvalidThreshold(_)
            | InvalidInterpolation(_)
            | UnsupportedMethod(_)
            | InvalidRecipe(_)
            | ZeroWeightSum
            | InvalidConfig(_)
            | InvalidName(_) => ErrorClass::Usage,
            NonFinite(_) | Divergence { .. } => ErrorClass::Numeric,
            ShapeMismatch { .. }
            | DataLength { .. }
            | EmptyParamSet
            | MissingParameter(_)
            | UnknownParameter(_)
            | Io { .. }
            | Format { .. }
            | DuplicateName(_)
            | EmptyBatch
            | EmptySuite
            | Json(_) => ErrorClass::Data,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
