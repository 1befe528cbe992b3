use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("utterance too short: {0}")]
    TooShort(String),

    #[error("utterance too short after subsampling: {frames} frames (need at least 15)")]
    TooShortAfterSubsampling { frames: usize },

    #[error("empty attention row {row}")]
    EmptyAttentionRow { row: usize },

    #[error("no valid alignment: {labels} labels ({repeats} repeats) need at least {needed} frames, got {frames}")]
    NoValidAlignment {
        labels: usize,
        repeats: usize,
        needed: usize,
        frames: usize,
    },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("stream error: {0}")]
    Stream(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("checkpoint error in {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("parse error at {location}: {msg}")]
    Parse { location: String, msg: String },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
