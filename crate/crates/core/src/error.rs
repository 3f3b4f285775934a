use std::time::Duration;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("non-finite value in {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("invalid parameter `{name}`: {msg}")]
    Parameter { name: &'static str, msg: String },

    #[error("configuration error for `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("collective protocol error: {0}")]
    Protocol(String),

    #[error("timed out after {0:?}")]
    Timeout(Duration),

    #[error("data pipeline failed while preparing batch {index}: {msg}")]
    Pipeline { index: usize, msg: String },

    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: usize, msg: String },

    #[error("captured plan invalidated for key {key}: {msg}")]
    CaptureInvalidated { key: String, msg: String },

    #[error("autotune failed for {op}: {msg}")]
    Autotune { op: String, msg: String },

    #[error("evaluation failed at step {step}: {msg}")]
    Eval { step: usize, msg: String },

    #[error("parse error at {location}: {msg}")]
    Parse { location: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }
}
