use alloc::string::String;

/// Errors raised by the pure algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("unknown lesion label `{0}`")]
    UnknownLabel(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("validation fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("image has zero area")]
    EmptyImage,
    #[error("expected a {expected}x{expected} image, got {height}x{width}")]
    ShapeMismatch {
        expected: usize,
        height: usize,
        width: usize,
    },
    #[error("normalization std for channel {0} is zero")]
    ZeroStd(usize),
    #[error("mixup needs at least two items, got {0}")]
    BatchTooSmall(usize),
    #[error("logits contain a non-finite value")]
    NonFiniteLogits,
    #[error("target index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("no ground truth for `{0}`")]
    MissingTruth(String),
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
