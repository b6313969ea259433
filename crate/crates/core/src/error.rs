//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("graph already consumed by backward")]
    GraphConsumed,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training error: {0}")]
    Train(String),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
