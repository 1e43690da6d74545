use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("target vocabulary size {target} must exceed the {base} base entries (bytes + specials)")]
    VocabTooSmall { target: usize, base: usize },

    #[error("token id {id} at position {position} is out of range for a vocabulary of {vocab_size}")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },

    #[error("invalid word {word:?}: {reason}")]
    InvalidWord { word: String, reason: &'static str },

    #[error("missing id {0} in count table")]
    MissingId(u32),

    #[error("duplicate id {0} in count table")]
    DuplicateId(u32),

    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("prompt has no corruption spans")]
    EmptySpans,

    #[error("{spans} corruption spans exceed the {sentinels} available sentinels")]
    TooManySpans { spans: usize, sentinels: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged {
        step: usize,
        loss: f64,
        /// Losses of every completed step before the failure.
        trace: Vec<f64>,
    },

    #[error("no training example yields corrupted tokens")]
    NoCorruptedTokens,

    #[error("token {0} does not occur in any corruption span")]
    TokenNotInSpans(u32),

    #[error("missing reconstructions for ids {0:?}")]
    MissingReconstructions(Vec<u32>),

    #[error("training data contains a single class")]
    SingleClass,

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
