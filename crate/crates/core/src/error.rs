use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A model or run configuration that cannot be realised.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument violated an operation's precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A value fell outside the numeric domain of an operation.
    #[error("numeric domain error: {0}")]
    Numeric(String),

    #[error("power iteration did not converge after {iterations} iterations (last estimate {last_estimate})")]
    Convergence { iterations: usize, last_estimate: f64 },

    #[error("malformed data in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn pre(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
