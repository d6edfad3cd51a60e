use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] srcverify::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        use srcverify::Error as E;
        match self {
            CliError::Core(e) => match e {
                E::Io { .. } => "io",
                E::Wav { .. } | E::Resample(_) | E::EmptyAudio(_) | E::NonFiniteAudio => "audio",
                E::StartOutOfRange { .. } => "segment",
                E::InvalidArgument(_) => "invalid_argument",
                E::Manifest(_) => "manifest",
                E::SplitTooSmall(_) => "split_too_small",
                E::Shape(_) => "shape_mismatch",
                E::Checkpoint(_) => "checkpoint",
                E::Diverged { .. } => "diverged",
                E::SingleClass { .. } => "single_class",
                E::Json(_) => "json",
            },
            CliError::Config(_) => "config",
            CliError::Missing(_) => "missing_input",
            CliError::Io { .. } => "io",
            CliError::Csv(_) => "csv",
            CliError::Image(_) => "image",
        }
    }

    /// The single-line JSON object printed on stderr before a nonzero exit.
    pub fn to_json(&self) -> String {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}
