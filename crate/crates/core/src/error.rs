use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid network layout: {0}")]
    InvalidLayout(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("action entry {value} at index {index} is outside [-1, 1]")]
    ActionOutOfRange { index: usize, value: f64 },

    #[error("episode already finished after {0} steps")]
    EpisodeFinished(usize),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("hessian is not symmetric (max asymmetry {0:e})")]
    HessianNotSymmetric(f64),

    #[error("hessian is not positive definite")]
    HessianNotPositiveDefinite,

    #[error("qp solver hit its iteration limit ({0})")]
    QpIterationLimit(usize),

    #[error("active constraint normals became linearly dependent")]
    DegenerateActiveSet,

    #[error("qp solution is not optimal")]
    NotOptimal,

    #[error("{key}: {message}")]
    InvalidConfig { key: String, message: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("batch has {actual} transitions, need at least {required}")]
    BatchTooSmall { required: usize, actual: usize },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
