//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by layout parsing, mask/position construction, the model,
/// the cache and the decode engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("token index {index} out of range for sequence of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("offset {offset} out of range for segment of length {len}")]
    OffsetOutOfRange { offset: usize, len: usize },

    #[error("path index {path} out of range (1..={n_paths})")]
    UnknownPath { path: usize, n_paths: usize },

    #[error("requested {requested} paths, maximum supported is {max}")]
    TooManyPaths { requested: usize, max: usize },

    #[error("vector length {got} does not match expected dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("unbalanced tag: {0}")]
    UnbalancedTag(String),

    #[error("think block opened after the summary block")]
    ThinkAfterSummary,

    #[error("path {0} opened while path {1} is still open")]
    InterleavedPath(usize, usize),

    #[error("duplicate think block for path {0}")]
    DuplicatePathIndex(usize),

    #[error("think block for path {got} where path {expected} was expected")]
    PathIndexOutOfOrder { expected: usize, got: usize },

    #[error("tagged stream contains no think blocks")]
    NoPaths,

    #[error("trailing tokens after the summary close tag")]
    TrailingTokens,

    #[error("token id {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfVocab { token: u32, vocab_size: usize },

    #[error("special token ids require vocab size > {needed}, got {vocab_size}")]
    VocabTooSmall { needed: u32, vocab_size: usize },

    #[error("block pool exhausted ({capacity} blocks)")]
    PoolExhausted { capacity: usize },

    #[error("sequence {seq} was not forked from the shared sequence {shared}")]
    NotForkedFromShared { seq: u64, shared: u64 },

    #[error("position {new} regresses behind previous position {last}")]
    PositionRegression { last: usize, new: usize },

    #[error("loss mask selects no target positions")]
    AllTargetsMasked,

    #[error("operation requires stage {expected}, session is in {actual}")]
    WrongStage {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("decode budget must be at least 1")]
    ZeroBudget,

    #[error("parallel mode requires a non-empty prompt")]
    EmptyPrompt,

    #[error("reasoning path text must be non-empty")]
    EmptyPathText,

    #[error("answer must not contain the boxed-answer delimiters")]
    AnswerContainsDelimiter,

    #[error("grid {h}x{w} too small for quadrant partitioning (need at least 2x2)")]
    DegenerateGrid { h: usize, w: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("malformed record: {0}")]
    BadRecord(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
