use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("batch norm in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("target vocabulary size {target} is below the minimum {minimum}")]
    VocabTooSmall { target: usize, minimum: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
