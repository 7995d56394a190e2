use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} is invalid for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: reduction axis is empty in shape {shape:?}")]
    EmptyAxis { op: &'static str, shape: Vec<usize> },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward was already run on this tape; run a new forward pass first")]
    TapeConsumed,
    #[error("variables belong to different tapes")]
    ForeignTape,
    #[error("sequence must not be empty")]
    EmptySequence,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input `{name}` has shape {got:?}, expected {expected:?}")]
    InputShape {
        name: &'static str,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("timestamps out of order at line {line}: {current} is not after {previous}")]
    Ordering {
        line: usize,
        previous: String,
        current: String,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error("{path}: {source}")]
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

    /// True for failures caused by numerics rather than inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Diverged { .. })
    }
}
