use std::path::PathBuf;

use thiserror::Error;

use crate::samplers::SamplerKind;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("schedule degenerate at t={t}: {reason}")]
    ScheduleDegenerate { t: usize, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("step index {t} outside [{lo}, {hi}]")]
    IndexOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("direction is not a unit vector (norm {norm})")]
    NotUnitVector { norm: f64 },

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("failed to load target {path}: {reason}")]
    TargetLoadFailed { path: PathBuf, reason: String },

    #[error("covariance is not positive definite")]
    SingularCovariance,

    #[error("sampler {0} has no affine form")]
    UnsupportedKind(SamplerKind),

    #[error("too few samples: {got} < {min}")]
    TooFewSamples { got: usize, min: usize },

    #[error("sample covariance is not positive definite")]
    DegenerateCovariance,

    #[error("slope fit needs at least 3 points, got {0}")]
    InsufficientPoints(usize),

    #[error("value {value} at index {index} is not positive")]
    NonpositiveValue { index: usize, value: f64 },

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
