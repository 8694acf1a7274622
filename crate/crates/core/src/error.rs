use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
///
/// `category()` gives a stable single-word tag used by the CLI for its
/// machine-parseable error line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: malformed input at byte {offset}: expected {expected}")]
    Format {
        path: String,
        offset: u64,
        expected: String,
    },

    #[error("unknown ids: {}", .0.join(", "))]
    UnknownIds(Vec<String>),

    #[error("query sets differ; symmetric difference: {}", .0.join(", "))]
    QueryMismatch(Vec<String>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, offset: u64, expected: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            expected: expected.into(),
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Usage(_) => "usage",
            Error::Format { .. } => "format",
            Error::UnknownIds(_) => "unknown-ids",
            Error::QueryMismatch(_) => "query-mismatch",
            Error::NonFinite(_) => "non-finite",
            Error::Io { .. } => "io",
        }
    }
}
