use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KdError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token id {id} is outside a vocabulary of size {vocab}")]
    InvalidToken { id: u32, vocab: usize },
    #[error("input of length {len} exceeds the maximum of {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("incompatible vocabulary: {0}")]
    IncompatibleVocab(String),
    #[error("teacher store does not match the target corpus: {0}")]
    Misalignment(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, KdError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(KdError::InvalidArgument(msg.into()))
}
