//! Quantization-aware training primitives.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a small tape-based reverse-mode engine over dense tensors,
//!   with support for custom-gradient (surrogate) operations.
//! - [`rounding`]: forward rounding plus the pass-through and sigmoid
//!   straight-through gradient multipliers.
//! - [`softclamp`]: gate functions, the smooth `SoftClamp` surrogate and the
//!   hard clamp it replaces.
//! - [`quantizer`]: the fake-quantization operator `s * round(clamp(x / s))`
//!   with input and step-size gradients, MinMax scales and integer export.
//! - [`models`]: a quantized linear layer, single-head attention with a
//!   quantized KV cache and a tiny character-level language model.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the 64-bit instantiation used for training and
//! verification.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod quantizer;
pub mod rounding;
pub mod scalar;
pub mod softclamp;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape32 = autodiff::Tape<f32>;

pub type RoundingEstimator64 = rounding::RoundingEstimator<f64>;
pub type GateFunction64 = softclamp::GateFunction<f64>;
pub type ClampBounds64 = softclamp::ClampBounds<f64>;
pub type ClampMode64 = softclamp::ClampMode<f64>;
pub type QuantConfig64 = quantizer::QuantConfig<f64>;
pub type QuantKernel64 = quantizer::QuantKernel<f64>;
pub type TinyLm64 = models::TinyLm<f64>;
pub type TinyLm32 = models::TinyLm<f32>;
