use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = WegenError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum WegenError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for tensor of rank {rank} in {op}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing ids: {}", .0.join(", "))]
    MissingIds(Vec<String>),

    #[error("checkpoint version {found} is not supported (this build reads version {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl WegenError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WegenError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        WegenError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
