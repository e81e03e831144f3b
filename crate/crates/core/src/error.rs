use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("sequence of length {len} is shorter than kernel size {kernel}")]
    SequenceTooShort { len: usize, kernel: usize },

    #[error("batch norm needs at least 2 rows in training mode, got {rows}")]
    DegenerateBatch { rows: usize },

    #[error("every position of an attention row is masked")]
    DegenerateAttention,

    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    #[error("{what} index {index} out of range 0..{len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },

    #[error("schema: {0}")]
    Schema(String),

    #[error("empty class {0:?}")]
    EmptyClass(String),

    #[error("{0}")]
    Data(String),

    #[error("non-finite gradient in parameter {param}")]
    NanGradient { param: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("explanation: {0}")]
    Explain(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

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

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Whether the failure is about the input data rather than the program
    /// or its configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Row { .. }
                | Error::Schema(_)
                | Error::EmptyClass(_)
                | Error::Data(_)
                | Error::Csv(_)
                | Error::Io { .. }
        )
    }
}
