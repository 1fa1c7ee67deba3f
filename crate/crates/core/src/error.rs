use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MissError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MissError {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("id out of range: {0}")]
    IdOutOfRange(usize),

    #[error("invalid probability {name} = {value}")]
    InvalidProbability { name: &'static str, value: f64 },

    #[error("image not divisible by patch size ({height}x{width}, patch {patch})")]
    ImageNotDivisible { height: usize, width: usize, patch: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("wrong token mode: expected {expected}, got {got}")]
    Mode { expected: &'static str, got: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot sample negative: batch size {0}")]
    CannotSampleNegative(usize),

    #[error("unknown parameter '{0}'")]
    UnknownParam(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("{path}:{line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },

    #[error("row {row}: unmapped value '{value}' for field '{field}'")]
    UnmappedLabel { row: usize, field: String, value: String },

    #[error("row {row}: missing field '{field}'")]
    MissingField { row: usize, field: String },

    #[error("LLM output failed attribute-coverage validation")]
    CoverageValidation,

    #[error("LLM request failed after {attempts} attempts ({cached} responses cached): {message}")]
    Network { attempts: usize, cached: usize, message: String },

    #[error("missing prediction for id '{0}'")]
    MissingPrediction(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("row {row}: {source}")]
    Row { row: usize, source: Box<MissError> },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl MissError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MissError::Io { path: path.into(), source }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        MissError::Shape(msg.into())
    }
}
