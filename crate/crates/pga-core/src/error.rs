use std::path::PathBuf;

/// Crate-wide error type. The CLI maps variants onto exit codes, so new
/// variants need a mapping there as well.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or arguments (bad shapes, ranges, guards).
    #[error("config error: {0}")]
    Config(String),

    /// A required on-disk artifact is absent or fails validation.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Numeric failure: non-finite values, rank deficiency, divergence.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed file contents (bad magic, truncated payload, parse failure).
    #[error("invalid data in {path}: {reason}")]
    InvalidData { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Error::MissingArtifact(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn invalid(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::InvalidData {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
