use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("matmul dimension mismatch: {left:?} x {right:?}")]
    MatmulMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("operation requires a non-empty tensor")]
    EmptyTensor,

    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },

    #[error("backward seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),

    #[error("scale must be positive and finite, got {0}")]
    NonPositiveScale(f64),

    #[error("sigmoid estimator value is only defined for x >= 0, got {0}")]
    NegativeInput(f64),

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("gate slope must be positive and finite, got {0}")]
    InvalidGateSlope(f64),

    #[error("clamp bounds must satisfy a < b, got [{a}, {b}]")]
    InvalidBounds { a: f64, b: f64 },

    #[error("unsupported bit width {0} (expected 2..=8)")]
    InvalidBits(u32),

    #[error("sequence length {len} exceeds context {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
