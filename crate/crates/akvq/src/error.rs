//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any operation in this crate.
///
/// Variants are grouped by failure kind so callers can match on the class
/// of failure (format vs. shape vs. state) without parsing messages.
#[derive(Debug, Error)]
pub enum Error {
    /// Underlying I/O failure while reading or writing files.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (bad magic, unknown dtype, bad grammar).
    #[error("format error: {0}")]
    Format(String),

    /// Payload or buffer shorter than the declared element count.
    #[error("length error: {0}")]
    Length(String),

    /// Declared dimensions overflow the addressable size.
    #[error("size error: {0}")]
    Size(String),

    /// Invalid parameter value.
    #[error("parameter error: {0}")]
    Param(String),

    /// Non-finite values where finite reals are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Tensor shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Operation not valid in the current object state.
    #[error("state error: {0}")]
    State(String),

    /// Input data violates a documented contract (labels, row sums).
    #[error("input error: {0}")]
    Input(String),

    /// Metric is mathematically undefined for this input.
    #[error("undefined metric: {0}")]
    Undefined(String),
}

pub type Result<T> = std::result::Result<T, Error>;
