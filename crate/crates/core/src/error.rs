//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes surfaced
/// by the public API: shape/dimension violations, bad indices, invalid
/// configuration, lifecycle misuse, numeric breakdown, and file parsing.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A sample or row index is out of range or duplicated where it must not be.
    #[error("index error: {0}")]
    Index(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// An API was called in a state that does not permit it.
    #[error("state error: {0}")]
    State(String),

    /// An operation's usage contract was violated (e.g. non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN/Inf or another numeric breakdown, with context.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Batch statistics are undefined (fewer than two samples).
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// A row has (near-)zero norm where unit normalization is required.
    #[error("degenerate row {row}: norm {norm:e} below threshold")]
    DegenerateRow { row: usize, norm: f64 },

    /// Malformed file content; offset is in bytes from the start of the file.
    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse {
        path: String,
        offset: u64,
        msg: String,
    },

    /// Dataset-level inconsistency (mixed shapes, missing labels, ...).
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by user-supplied configuration or arguments
    /// rather than by a runtime/numeric failure. The CLI maps these to
    /// exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse { .. })
    }
}
