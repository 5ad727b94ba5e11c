//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or matrix extents.
    #[error("dimension error in {op}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        expected: String,
        actual: String,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or file.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset or file ingestion failure.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// Non-finite value or numeric domain violation during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 ingestion, 4 numeric, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Ingestion(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
