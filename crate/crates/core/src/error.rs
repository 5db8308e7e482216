use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    Overflow { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("id {id} out of range for vocabulary of size {limit}")]
    Range { id: usize, limit: usize },

    #[error("sequence of length {len} exceeds context window {ctx_len}")]
    ContextOverflow { len: usize, ctx_len: usize },

    #[error("training diverged at step {step}: non-finite {what}")]
    Divergence { step: u64, what: String },

    #[error("invalid UTF-8 at byte offset {offset}")]
    Utf8 { offset: usize },

    #[error("invalid UTF-8 in {path}:{line} at byte offset {offset}")]
    Decode {
        path: PathBuf,
        line: u64,
        offset: usize,
    },

    #[error("tokenizer hash mismatch: checkpoint expects {expected}, got {found}")]
    TokenizerMismatch { expected: String, found: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
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

    /// True for errors caused by bad user input or configuration, as opposed
    /// to failures while doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Input(_)
                | Error::Validation(_)
                | Error::Range { .. }
                | Error::ContextOverflow { .. }
                | Error::Utf8 { .. }
                | Error::Decode { .. }
                | Error::TokenizerMismatch { .. }
                | Error::Json(_)
        )
    }
}
