//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

/// Errors raised by the credit-assignment pipeline, the simulator and the file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two sequences that must be aligned have different lengths.
    #[error("length mismatch in {context}: expected {expected}, found {found}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    /// An operation that needs at least one element received none.
    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    /// A trajectory, group or segment list violates a data-model invariant.
    #[error("invariant `{invariant}` violated: {detail}")]
    Invariant {
        invariant: &'static str,
        detail: String,
    },

    /// Configuration value out of its admissible range or unknown.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Environment misuse (out-of-vocabulary action, unterminated episode, ...).
    #[error("environment error: {0}")]
    Env(String),

    /// A NaN or infinity appeared in an intermediate quantity.
    #[error("non-finite value at {location}")]
    Numeric { location: String },

    /// Malformed line in a trace file.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invariant(invariant: &'static str, detail: impl Into<String>) -> Self {
        Error::Invariant {
            invariant,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the CLI: 1 usage/config, 2 data/validation, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric { .. } => 3,
            _ => 2,
        }
    }
}
