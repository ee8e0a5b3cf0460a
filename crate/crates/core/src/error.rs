use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("loss must be a scalar, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("primitive `{0}` has no gradient but lies on a differentiable path")]
    UnsupportedPrimitive(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("objective is not deterministic: two evaluations at the same point differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),

    #[error("conflicting perturbation on target `{0}`")]
    ConflictingPerturbation(String),

    #[error("pixel ({x}, {y}) outside image of {width}x{height}")]
    PixelOutOfBounds { x: usize, y: usize, width: usize, height: usize },

    #[error("image shape mismatch: {0}")]
    ImageMismatch(String),

    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall { width: usize, height: usize, window: usize },

    #[error("empty mask: no pixel qualifies for evaluation")]
    EmptyMask,

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("checkpoint config hash mismatch: file has {found}, expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("dataset mismatch: {0}")]
    DatasetMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("JSON error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Schema { path: path.into(), message: message.into() }
    }
}
