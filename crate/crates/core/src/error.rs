use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error class, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    Domain(String),

    #[error("invalid usage: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite intermediate in coupling layer {}: {what}", layer.map_or("?".to_string(), |l| l.to_string()))]
    Density { layer: Option<usize>, what: String },

    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Training {
        epoch: usize,
        step: usize,
        what: String,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error at line {line}: {what}")]
    Parse { line: u64, what: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("threshold error: {0}")]
    Threshold(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("zero vector at index {index}")]
    Similarity { index: usize },

    #[error("solver did not converge after {iterations} iterations (KKT violation {residual:.3e})")]
    Solver { iterations: usize, residual: f64 },

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

    pub(crate) fn at_layer(self, index: usize) -> Self {
        match self {
            Error::Density { what, .. } => Error::Density {
                layer: Some(index),
                what,
            },
            other => other,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Shape(_) => ErrorCategory::Usage,
            Error::Checkpoint(_)
            | Error::Parse { .. }
            | Error::Data(_)
            | Error::Split(_)
            | Error::Io { .. }
            | Error::Threshold(_)
            | Error::Metric(_)
            | Error::Similarity { .. } => ErrorCategory::Data,
            Error::Domain(_)
            | Error::Density { .. }
            | Error::Training { .. }
            | Error::State(_)
            | Error::Solver { .. } => ErrorCategory::Numeric,
        }
    }
}
