use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode wav {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("resampling failed: {0}")]
    Resample(String),

    #[error("audio {0} has no samples")]
    EmptyAudio(String),

    #[error("audio contains non-finite samples")]
    NonFiniteAudio,

    #[error("segment start {start} is beyond the end of a waveform of {len} samples")]
    StartOutOfRange { start: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("split too small: {0}")]
    SplitTooSmall(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("metric needs both labels present ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
