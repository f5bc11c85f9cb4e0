use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid dimensions {height}x{width}")]
    InvalidDimensions { height: usize, width: usize },

    #[error("buffer holds {actual} values, expected {expected}")]
    BufferLength { expected: usize, actual: usize },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("metric needs both classes, got {positives} positive and {negatives} negative")]
    SingleClass { positives: usize, negatives: usize },

    #[error("no positive labels")]
    NoPositives,

    #[error("no ground-truth regions")]
    NoRegions,

    #[error("no normal pixels to measure false positives on")]
    NoNegatives,

    #[error("false-positive-rate limit {0} outside (0, 1]")]
    InvalidFprLimit(f64),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter {
        name: &'static str,
        reason: &'static str,
    },

    #[error("no texture images to overlay")]
    NoTextures,
}
