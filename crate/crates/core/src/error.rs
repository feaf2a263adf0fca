use thiserror::Error;

use crate::autodiff::AdError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation pair (z_cos, z_sin) is (0, 0)")]
    DegenerateRotation,
    #[error("scale bounds out of order: min {min} >= max {max}")]
    BoundOrder { min: f64, max: f64 },
    #[error("pixel ({x}, {y}) outside the image")]
    PixelOutOfBounds { x: f64, y: f64 },
    #[error("axis scale must be positive, got {0:?}")]
    NonPositiveAxisScale([f64; 3]),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("ground-truth depth must be positive (pixel {index} = {value})")]
    NonPositiveDepth { index: usize, value: f64 },
    #[error("slot index {index} out of range for {len} slots")]
    SlotIndex { index: usize, len: usize },
    #[error("rejection sampling gave up after {attempts} attempts")]
    Rejected { attempts: usize },
    #[error("target image is fully explained by the current render")]
    FullyExplained,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid file {path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}
