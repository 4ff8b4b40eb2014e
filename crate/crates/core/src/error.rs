use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("mel-spectrogram too short: {frames} frames, need at least {needed}")]
    TooShort { frames: usize, needed: usize },

    #[error("shape mismatch in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("non-finite loss in term `{0}`")]
    NonFiniteLoss(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("strategy unavailable: {0}")]
    StrategyUnavailable(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by the caller (bad flags, files, labels) rather
    /// than by a defect or numerical failure inside the pipeline.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss(_) | Error::Shape { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
