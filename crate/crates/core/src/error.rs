//! Error type shared by every module of the toolkit.

use thiserror::Error;

/// Unified error for tensor math, tokenization, model, training, and decoding.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; the message names both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Invalid configuration value or combination.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// An operation was called outside its contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Out-of-range id or index; the message carries the offending value.
    #[error("index out of range: {0}")]
    Index(String),
    /// Malformed or inconsistent input data.
    #[error("invalid input: {0}")]
    Input(String),
    /// Corrupt, truncated, or mismatched checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
