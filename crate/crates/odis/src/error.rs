use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OdisError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {file} at byte {offset}: {msg}")]
    Parse {
        file: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("non-finite loss at step {step}; diagnostic snapshot at {snapshot}")]
    NonFinite { step: u64, snapshot: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OdisError>;

impl OdisError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        OdisError::InvalidArg(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        OdisError::Config(msg.into())
    }
}
