use std::io;

use thiserror::Error;

pub type Result<T, E = LensError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LensError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate attention row {row}")]
    DegenerateAttentionRow { row: usize },

    #[error("point ({x}, {y}) lies outside the {h}x{w} heatmap")]
    PointOutsideHeatmap { x: f64, y: f64, h: usize, w: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("segmentation requires an image")]
    MissingImage,

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),

    #[error("checksum error: {0}")]
    Checksum(String),

    #[error("tensor file format error: {0}")]
    Format(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LensError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        LensError::Shape(msg.into())
    }
}
