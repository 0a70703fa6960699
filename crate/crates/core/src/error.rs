use std::io;

use thiserror::Error;

/// Errors produced anywhere in the decoding pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    /// The model produced something unusable (non-finite logits, wrong length).
    #[error("model error: {0}")]
    Model(String),
    /// Talking to a remote logit server failed.
    #[error("connection error: {0}")]
    Connection(String),
    /// A trace file could not be decoded.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("refusing to replay: trace was recovered under model {trace} but the current model is {model}")]
    FingerprintMismatch { trace: String, model: String },
    #[error("{path}:{line}: {message}")]
    Dataset {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
