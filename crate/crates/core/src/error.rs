use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{what}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { what: &'static str, index: usize, bound: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{what}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite {phase} loss {value} at iteration {iteration}")]
    NonFiniteLoss { phase: &'static str, iteration: usize, value: f64 },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("{what} has {len} tokens, at least {min} required")]
    TooShort { what: &'static str, len: usize, min: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("context overflow: {len} tokens exceed context length {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
