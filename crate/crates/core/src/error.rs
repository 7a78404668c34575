use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, indices, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("inflation error at layer `{layer}`: {reason}")]
    Inflation { layer: String, reason: String },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)*)));
        }
    };
}
pub(crate) use ensure;
