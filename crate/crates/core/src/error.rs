use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("target id {id} at position {position} is outside a vocabulary of {vocab}")]
    TargetOutOfRange {
        id: usize,
        position: usize,
        vocab: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any tensor that requires grad")]
    DetachedLoss,
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("training diverged: non-finite gradient for `{0}`")]
    Divergence(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("memory bank: {0}")]
    Bank(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("sequence of {len} tokens exceeds max_sequence_length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
