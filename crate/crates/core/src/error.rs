use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("distribution has no mass to normalize (sum = {0:e})")]
    ZeroMass(f64),
    #[error("negative entry {value} at index {index}")]
    NegativeMass { index: usize, value: f64 },
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("training loss diverged at step {step} (loss = {loss})")]
    DivergedLoss { step: usize, loss: f64 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("restricted distributions have different support (index {index})")]
    SubsetMismatch { index: usize },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("labeled data contains a single class")]
    DegenerateLabels,
    #[error("ragged score table: prompt {prompt} has {got} scores, expected {expected}")]
    RaggedInput { prompt: usize, expected: usize, got: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("scorer transport failed after {attempts} attempts: {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("malformed scorer response: {0}")]
    MalformedResponse(String),
    #[error("scorer returned out-of-range score {0}")]
    OutOfRangeScore(f64),
    #[error("soft prompt was trained against a different backbone (expected {expected}, found {found})")]
    FingerprintMismatch { expected: String, found: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
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
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse { line, message: message.into() }
    }

    /// Wraps the error with a description of what was being attempted.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// The innermost error, skipping any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
