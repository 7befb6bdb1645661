//! Error type shared across the library.
//!
//! Every fallible operation returns [`Error`]; the CLI maps any of these to
//! exit code 1, reserving exit code 2 for argument parsing.

use std::path::PathBuf;

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A data or model file could not be parsed. `line` is 1-based and 0
    /// when the failure is not tied to a specific line.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A record's embedding width disagrees with the rest of the file.
    #[error("{path}:{line}: embedding has {found} dimensions, expected {expected}")]
    DimensionMismatch {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    /// A dataset file contained no records.
    #[error("{path}: dataset contains no records")]
    EmptyDataset { path: PathBuf },

    /// The dataset has fewer classes than an episode needs.
    #[error("dataset has {available} classes but the episode needs {needed}")]
    WayCapacity { available: usize, needed: usize },

    /// A specific class has too few samples for an episode.
    #[error("class \"{label}\" has {available} samples but the episode needs {needed}")]
    ClassCapacity {
        label: String,
        available: usize,
        needed: usize,
    },

    /// No support samples were provided for a class that the episode's
    /// class map declares.
    #[error("no support samples for class \"{0}\"")]
    MissingClass(String),

    /// Array shapes disagree (network width vs. embedding width, gradient
    /// vs. parameter layout, ...).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation that works on query pairs received fewer than two
    /// queries.
    #[error("need at least 2 query samples, got {0}")]
    InsufficientPairs(usize),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Shorthand used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
