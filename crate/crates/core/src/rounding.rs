//! Rounding and its backward surrogates.
//!
//! The forward pass always rounds half away from zero. The backward pass
//! replaces the (almost everywhere zero) derivative of rounding with a
//! multiplier chosen by [`RoundingEstimator`]:
//!
//! - `PassThrough`: the vanilla straight-through estimator, multiplier 1.
//! - `Sigmoid { temperature }`: a sum of logistic-derivative bumps
//!   `T e^{T(x-i)} / (1 + e^{T(x-i)})^2`, one per integer centre `i`, each of
//!   height `T/4` and unit mass. Larger `T` concentrates the gradient around
//!   the integers.
//!
//! Only the centres `floor(x) - 1 ..= floor(x) + 1` contribute, intersected
//! with the quantizer's code range; farther bumps are below `e^{-2T}`.

use crate::error::{Error, Result};
use crate::scalar::{logistic, Scalar};

/// Inclusive integer interval of admissible codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodeRange {
    pub lo: i64,
    pub hi: i64,
}

impl CodeRange {
    pub const UNBOUNDED: CodeRange = CodeRange { lo: i64::MIN, hi: i64::MAX };

    pub fn new(lo: i64, hi: i64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, i: i64) -> bool {
        self.lo <= i && i <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RoundingEstimator<F> {
    PassThrough,
    Sigmoid { temperature: F },
}

impl<F: Scalar> RoundingEstimator<F> {
    pub fn sigmoid(temperature: F) -> Result<Self> {
        if !(temperature.is_finite() && temperature > F::zero()) {
            return Err(Error::InvalidTemperature(temperature.to_f64_lossy()));
        }
        Ok(Self::Sigmoid { temperature })
    }

    /// `T = 0` selects the pass-through estimator; positive `T` the sigmoid one.
    pub fn from_temperature(temperature: F) -> Result<Self> {
        if temperature == F::zero() {
            Ok(Self::PassThrough)
        } else {
            Self::sigmoid(temperature)
        }
    }

    /// `0` for pass-through.
    pub fn temperature(&self) -> F {
        match self {
            Self::PassThrough => F::zero(),
            Self::Sigmoid { temperature } => *temperature,
        }
    }

    /// Backward multiplier standing in for `d round(x) / dx`.
    pub fn multiplier(&self, x: F, range: CodeRange) -> F {
        match *self {
            Self::PassThrough => F::one(),
            Self::Sigmoid { temperature } => {
                let centre = x.floor().to_i64().unwrap_or(0);
                (centre - 1..=centre + 1)
                    .filter(|&i| range.contains(i))
                    .map(|i| sigmoid_bump(x - F::of_int(i), temperature))
                    .sum()
            }
        }
    }
}

/// Forward rounding, ties away from zero.
#[inline]
pub fn round_forward<F: Scalar>(x: F) -> F {
    x.round()
}

/// Single bump `T e^{Tu} / (1 + e^{Tu})^2`; even in `u`, peak `T/4` at 0.
#[inline]
pub fn sigmoid_bump<F: Scalar>(u: F, temperature: F) -> F {
    let e = (-(temperature * u).abs()).exp();
    let d = F::one() + e;
    temperature * e / (d * d)
}

/// Literal sigmoid estimator value `sum_{i=0}^{floor(x)} 1 / (1 + e^{T(x - i)})`.
///
/// Diagnostic only; the training forward pass rounds exactly.
pub fn sigmoid_ste_value<F: Scalar>(x: F, temperature: F) -> Result<F> {
    if x < F::zero() {
        return Err(Error::NegativeInput(x.to_f64_lossy()));
    }
    let top = x.floor().to_i64().unwrap_or(0);
    Ok((0..=top).map(|i| logistic(-temperature * (x - F::of_int(i)))).sum())
}

/// Value function summed over the same centre window as
/// [`RoundingEstimator::multiplier`]. Its derivative is the negated
/// multiplier away from integer points (each falling sigmoid contributes
/// `-bump`).
pub fn sigmoid_ste_window_value<F: Scalar>(x: F, temperature: F, range: CodeRange) -> F {
    let centre = x.floor().to_i64().unwrap_or(0);
    (centre - 1..=centre + 1).filter(|&i| range.contains(i)).map(|i| logistic(-temperature * (x - F::of_int(i)))).sum()
}
