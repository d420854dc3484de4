use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt data in {path}: {reason}")]
    CorruptData { path: PathBuf, reason: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("insufficient samples: need {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("value {value} outside attainable range [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },

    #[error("contact support too small: {pixels} pixels (minimum {minimum})")]
    InsufficientSupport { pixels: usize, minimum: usize },

    #[error("circle fit rejected: relative residual {residual:.3} exceeds {bound:.3}")]
    BadCircleFit { residual: f64, bound: f64 },

    #[error("point ({u:.4}, {v:.4}) lies outside the gradient domain of radius {limit:.4}")]
    OutsideDomain { u: f64, v: f64, limit: f64 },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("event {event} is not valid in mode {mode}")]
    InvalidTransition { mode: String, event: String },

    #[error("all texture features have zero variance")]
    ZeroVariance,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_frame(self, frame: usize) -> Self {
        Error::Frame {
            frame,
            source: Box::new(self),
        }
    }
}
