//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model or run configuration. `key` names the offending field.
    #[error("configuration error in `{key}`: {message}")]
    Config { key: String, message: String },

    /// Tensor shape disagreement between an input and what an operation expects.
    #[error("shape error in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    /// Bad argument value (out-of-range sigma, quality, fraction, ...).
    #[error("invalid argument `{name}`: {message}")]
    Argument { name: String, message: String },

    /// A forward pass produced NaN/Inf.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Training step aborted; carries the iteration and active-variant flag.
    #[error("training aborted at iteration {iteration} (variant flag {flag}): {message}")]
    Train {
        iteration: u64,
        flag: u8,
        message: String,
    },

    /// Checkpoint container is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A manifest file is missing entries or malformed.
    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn argument(name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Argument {
            name: name.into(),
            message: message.into(),
        }
    }
}
