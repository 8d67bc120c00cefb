use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence of length {len} exceeds max length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("{strategy} input of length {len} exceeds max length {max}")]
    PromptOverflow {
        strategy: &'static str,
        len: usize,
        max: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("story mismatch: {0} vs {1}")]
    StoryMismatch(String, String),

    #[error("no positive pairs")]
    NoPositivePairs,

    #[error("empty denominator: anchor has neither negatives nor a positive in its partition")]
    EmptyDenominator,

    #[error("negative-scope violation: {0}")]
    NegativeScope(String),

    #[error("label {0} is not in the label inventory")]
    UnknownLabel(String),

    #[error("overlapping gold spans [{0}, {1}) and [{2}, {3})")]
    OverlappingSpans(usize, usize, usize, usize),

    #[error("length mismatch: {0} predictions vs {1} gold")]
    LengthMismatch(usize, usize),

    #[error("empty training data: {0}")]
    EmptyData(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("coreference annotation '{0}' not found")]
    MissingCoref(String),

    #[error("unknown ablation axis '{0}'")]
    UnknownAxis(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
