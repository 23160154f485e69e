//! Crate-wide error type.

use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (architecture, schedule, loss weights, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid runtime input (out-of-range condition, length mismatch, ...).
    #[error("input error: {0}")]
    Input(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    /// Malformed dataset/checkpoint file; `offset` is the byte where parsing failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    /// NaN/Inf reached a place it must not.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Violated internal contract (shape mismatch between congruent buffers).
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;
