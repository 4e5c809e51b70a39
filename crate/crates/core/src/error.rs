use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vector norm is zero")]
    ZeroVector,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("resolution mismatch: expected {expected}, got {actual}")]
    ResolutionMismatch { expected: usize, actual: usize },
    #[error("feature map role mismatch: {0}")]
    RoleMismatch(String),
    #[error("length mismatch: {0} originals vs {1} edits")]
    LengthMismatch(usize, usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),

    #[error("dataset is empty")]
    EmptyDataset,
    #[error("directory {0} contains no usable entries")]
    EmptyDirectory(PathBuf),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("invalid attribute mix: {0}")]
    InvalidMix(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("missing labels: {0}")]
    MissingLabels(String),
    #[error("no predictor for attribute `{0}`")]
    MissingPredictor(String),

    #[error("non-finite loss at step {step}")]
    DivergenceDetected { step: usize },
    #[error("training failed: {0}")]
    TrainingFailed(String),
    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("need {needed} samples, have {available}")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("labeled set contains a single class")]
    SingleClass,
    #[error("face placement failed: {0}")]
    PlacementFailure(String),
    #[error("no samples to average")]
    EmptySamples,
    #[error("interpolation needs at least 2 steps, got {0}")]
    InvalidSteps(usize),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
