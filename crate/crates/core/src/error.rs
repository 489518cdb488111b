//! Library-wide error type.
//!
//! Variants are grouped by what the caller can do about them: configuration
//! errors are programming/usage mistakes, data errors come from malformed
//! input files or shape mismatches, and numerical errors mean a computation
//! produced non-finite values and the run cannot be trusted.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad argument or call sequence (e.g. placing quant nodes twice).
    #[error("configuration error: {0}")]
    Config(String),

    /// A named quantization slot does not exist in the model registry.
    #[error("unknown quantization slot `{0}`")]
    UnknownSlot(String),

    /// A slot is enabled for quantized execution but has no parameters.
    #[error("quantization slot `{0}` is enabled but has no parameters; calibrate first")]
    MissingParams(String),

    /// Tensor shape does not match what an operation requires.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// The graph rewrite refused to run because the model structure does not
    /// match the topology it knows how to transform.
    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    /// Malformed model/data file contents.
    #[error("invalid file contents: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A computation produced NaN/inf or otherwise left the numeric domain.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn shape(context: &str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.to_string(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
