use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid basis parameters: {0}")]
    InvalidBasis(String),

    #[error("filter size {size} exceeds cap {cap} (sigma = {sigma:.4}); sigma is running away")]
    SizeCap { size: usize, cap: usize, sigma: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward called before forward on {0}")]
    NoForwardCache(&'static str),

    #[error("singular Gram matrix (condition estimate {condition:.3e})")]
    SingularGram { condition: f64 },

    #[error("invalid resample request: {0}")]
    Resample(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },

    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    IdxMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated IDX file")]
    IdxTruncated { path: PathBuf },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("blob of radius {radius:.2} does not fit in a {size}x{size} image")]
    BlobFit { radius: f64, size: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
