use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into this type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    /// Converts an integer (a code or an index) into this type.
    #[inline]
    fn of_int(v: i64) -> Self {
        Self::from_i64(v).expect("integer representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Standard normal CDF.
    fn std_normal_cdf(self) -> Self;
}

impl Scalar for f32 {
    fn std_normal_cdf(self) -> Self {
        0.5 * libm::erfcf(-self * std::f32::consts::FRAC_1_SQRT_2)
    }
}

impl Scalar for f64 {
    fn std_normal_cdf(self) -> Self {
        0.5 * libm::erfc(-self * std::f64::consts::FRAC_1_SQRT_2)
    }
}

/// Numerically stable logistic function `1 / (1 + e^{-u})`.
#[inline]
pub fn logistic<F: Scalar>(u: F) -> F {
    if u >= F::zero() {
        F::one() / (F::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (F::one() + e)
    }
}

/// Derivative of [`logistic`], evaluated without overflow for large `|u|`.
#[inline]
pub fn logistic_derivative<F: Scalar>(u: F) -> F {
    let e = (-u.abs()).exp();
    let d = F::one() + e;
    e / (d * d)
}
