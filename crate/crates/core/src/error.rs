use snapture_nn::NnError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected {expected}-channel frame, got {got} channels")]
    InvalidChannelCount { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("window of side {window} does not fit a {width}x{height} frame")]
    WindowTooLarge {
        window: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("sequence of {len} frames is too short (need {min})")]
    SequenceTooShort { len: usize, min: usize },
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no hand detected")]
    NoHandDetected,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("manifest row {row}: {msg}")]
    ManifestParse { row: usize, msg: String },
    #[error("index out of range: {0}")]
    Index(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("training diverged at epoch {epoch}{}", trial.map(|t| format!(" (trial {t})")).unwrap_or_default())]
    TrainingDiverged { epoch: usize, trial: Option<usize> },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
