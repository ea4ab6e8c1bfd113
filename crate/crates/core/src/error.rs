//! Crate-wide error type.

/// Errors produced by model evaluation, data ingestion, and estimation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument left the mathematical domain of an operation
    /// (nonpositive quantity, zero substitution parameter, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An intermediate exponential left the representable range.
    #[error("overflow: {0}")]
    Overflow(String),

    /// A file could not be parsed; carries the location of the offense.
    #[error("parse error in {path} (record {row}): {msg}")]
    Parse {
        path: String,
        row: usize,
        msg: String,
    },

    /// A data invariant was violated (duplicate key, nonpositive value, gap).
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// A required cell, group, lag, or year is absent.
    #[error("missing data: {0}")]
    Missing(String),

    /// A differencing or averaging window cannot be formed.
    #[error("window error: {0}")]
    Window(String),

    /// Instruments and residual observations do not line up.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
