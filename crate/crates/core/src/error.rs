use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("autodiff: {0}")]
    Tape(String),

    #[error("{path}: malformed {field}: {detail}")]
    Format {
        path: PathBuf,
        field: &'static str,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("model graph: {0}")]
    Graph(String),

    #[error("pruning: {0}")]
    Prune(String),

    #[error("compaction check failed: max abs deviation {deviation:e} exceeds {tolerance:e}")]
    Tolerance { deviation: f64, tolerance: f64 },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Usage(_) => "usage",
            Error::Tape(_) => "tape",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::NonFinite(_) => "non_finite",
            Error::Graph(_) => "graph",
            Error::Prune(_) => "prune",
            Error::Tolerance { .. } => "tolerance",
        }
    }
}
