// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// The CLI maps each variant onto a stable category string (see
/// [`Error::category`]) so scripted runs can branch on the failure kind.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),

    #[error("shape mismatch for tensor `{tensor}`: {detail}")]
    ShapeMismatch { tensor: String, detail: String },

    #[error("non-finite value in tensor `{tensor}` at element {index}")]
    NonFinite { tensor: String, index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    InvalidToken { token: u32, vocab: usize },

    #[error("neuron ({layer}, {index}) outside model bounds")]
    InvalidNeuron { layer: usize, index: usize },

    #[error("forced position {position} outside generated range [{start}, {end})")]
    ForcedOutOfRange {
        position: usize,
        start: usize,
        end: usize,
    },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("query mismatch: {0}")]
    QueryMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category for this error.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::CorruptHeader(_) => "corrupt-header",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::NonFinite { .. } => "non-finite",
            Error::Config(_) => "config",
            Error::SequenceTooLong { .. } | Error::EmptySequence | Error::InvalidToken { .. } => {
                "bad-tokens"
            }
            Error::InvalidNeuron { .. } => "bad-neuron",
            Error::ForcedOutOfRange { .. } => "forced-range",
            Error::Diverged { .. } => "diverged",
            Error::InvalidInput(_) => "invalid-input",
            Error::QueryMismatch(_) => "query-mismatch",
            Error::Parse(_) => "parse",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
