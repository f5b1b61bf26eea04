//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/layer shape mismatches.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Malformed file names, manifests, image headers, config files.
    #[error("parse error: {0}")]
    Parse(String),

    /// Operations called in the wrong order (e.g. backward without forward).
    #[error("state error: {0}")]
    State(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for usage/validation, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim(_) | Error::Parse(_) | Error::Config(_) => 2,
            Error::State(_) | Error::Numeric(_) | Error::Io { .. } => 3,
        }
    }
}
