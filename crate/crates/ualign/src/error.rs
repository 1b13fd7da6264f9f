//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("labels too long for {frames} frames: {label_len} labels need at least {min_frames} frames")]
    LabelTooLong {
        label_len: usize,
        min_frames: usize,
        frames: usize,
    },

    #[error("label at position {position} is the blank id {blank_id}")]
    BlankInLabels { position: usize, blank_id: usize },

    #[error("{what} guard exceeded: {count} > limit {limit}")]
    GuardExceeded {
        what: &'static str,
        count: u128,
        limit: u128,
    },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("input of length {len} too short: adapter needs at least {min} frames")]
    InputTooShort { len: usize, min: usize },

    #[error("all target positions are ignored")]
    AllPositionsIgnored,

    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint tensor {tensor}: expected shape {expected}, found {found}")]
    CheckpointShape {
        tensor: String,
        expected: String,
        found: String,
    },

    #[error("corpus schema error at line {line}, field {field}: {message}")]
    CorpusSchema {
        line: usize,
        field: String,
        message: String,
    },

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
