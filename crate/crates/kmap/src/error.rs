//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KmapError {
    #[error("shape mismatch in `{op}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("index {index} out of range for `{what}` of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KmapError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        KmapError::Invalid(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, KmapError>;
