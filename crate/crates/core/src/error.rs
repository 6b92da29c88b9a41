use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("expected a scalar (0-dimensional) node, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("dimension mismatch: expected length {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("invalid example: {0}")]
    InvalidExample(String),

    #[error("degenerate gradient: norm {norm:e} is at or below the floor {floor:e}")]
    DegenerateGradient { norm: f64, floor: f64 },

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("insufficient samples: need at least {needed} per group, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("both groups have zero variance")]
    ZeroVariance,

    #[error("non-finite gradient entry at flat index {0}; optimizer step aborted")]
    NonFiniteGradient(usize),

    #[error("invalid settings: {0}")]
    InvalidSpec(String),

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
