use std::path::PathBuf;

use thiserror::Error;

use crate::model::ModelKind;

/// Errors raised anywhere in the inference, training and I/O stack.
#[derive(Debug, Error)]
pub enum QtError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A Gaussian quantity left its valid domain (improper cavity, nonpositive variance).
    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("state space of {states} joint assignments exceeds the enumeration bound of {bound}")]
    Capacity { states: u128, bound: u128 },

    #[error("cannot estimate emission noise: no pixel labelled {0} in the corpus")]
    Estimation(&'static str),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint format error in field `{field}`: {msg}")]
    Format { field: &'static str, msg: String },

    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch { expected: ModelKind, found: ModelKind },

    #[error("training diverged at epoch {epoch} with lr {lr}")]
    Diverged { epoch: usize, lr: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QtError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(QtError::InvalidArgument(msg.into()))
}
