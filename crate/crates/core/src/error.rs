use std::io;

use thiserror::Error;

use crate::TokenId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("split of length {len} is too short for windows of {window} tokens")]
    SplitTooShort { len: usize, window: usize },

    #[error("requested {requested} examples but only {available} windows fit")]
    NotEnoughWindows { requested: usize, available: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("empty neighbor list")]
    NoNeighbors,

    #[error("datastore is empty")]
    EmptyDatastore,

    #[error("non-finite training loss at epoch {epoch}, step {step} (lr={learning_rate})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        learning_rate: f64,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
