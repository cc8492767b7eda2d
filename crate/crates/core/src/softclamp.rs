//! Smooth clamping.
//!
//! `SoftClamp(x, a, b) = x g(x - a) g(b - x) + a g(a - x) + b g(x - b)` where
//! `g` is an S-shaped gate into `(0, 1)` with `g(u) + g(-u) = 1`. Deep inside
//! `[a, b]` it follows `x`, far outside it settles on the nearer bound, and
//! unlike the hard clamp its derivative never becomes exactly zero.

use crate::error::{Error, Result};
use crate::scalar::{logistic, logistic_derivative, Scalar};

/// Gate used inside [`soft_clamp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateFunction<F> {
    /// `1 / (1 + e^{-beta u})`, the gate of SiLU / Swish.
    Logistic { beta: F },
    /// Standard normal CDF, the gate of GeLU.
    GaussianCdf,
}

impl<F: Scalar> Default for GateFunction<F> {
    fn default() -> Self {
        Self::Logistic { beta: F::one() }
    }
}

impl<F: Scalar> GateFunction<F> {
    pub fn logistic(beta: F) -> Result<Self> {
        if !(beta.is_finite() && beta > F::zero()) {
            return Err(Error::InvalidGateSlope(beta.to_f64_lossy()));
        }
        Ok(Self::Logistic { beta })
    }

    #[inline]
    pub fn value(&self, u: F) -> F {
        match *self {
            Self::Logistic { beta } => logistic(beta * u),
            Self::GaussianCdf => u.std_normal_cdf(),
        }
    }

    #[inline]
    pub fn derivative(&self, u: F) -> F {
        match *self {
            Self::Logistic { beta } => beta * logistic_derivative(beta * u),
            Self::GaussianCdf => {
                let two_pi = F::lit(std::f64::consts::TAU);
                (-(u * u) / F::lit(2.0)).exp() / two_pi.sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClampBounds<F> {
    a: F,
    b: F,
}

impl<F: Scalar> ClampBounds<F> {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // !(a < b) also rejects NaN
    pub fn new(a: F, b: F) -> Result<Self> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidBounds { a: a.to_f64_lossy(), b: b.to_f64_lossy() });
        }
        Ok(Self { a, b })
    }

    /// `[-c, c]`
    pub fn symmetric(c: F) -> Result<Self> {
        Self::new(-c, c)
    }

    pub fn lower(&self) -> F {
        self.a
    }

    pub fn upper(&self) -> F {
        self.b
    }
}

pub fn gate<F: Scalar>(u: F, g: GateFunction<F>) -> F {
    g.value(u)
}

pub fn soft_clamp<F: Scalar>(x: F, bounds: ClampBounds<F>, g: GateFunction<F>) -> F {
    let ClampBounds { a, b } = bounds;
    x * g.value(x - a) * g.value(b - x) + a * g.value(a - x) + b * g.value(x - b)
}

/// Analytic `d soft_clamp / dx`.
pub fn soft_clamp_dx<F: Scalar>(x: F, bounds: ClampBounds<F>, g: GateFunction<F>) -> F {
    let ClampBounds { a, b } = bounds;
    let (ga, gb) = (g.value(x - a), g.value(b - x));
    ga * gb + x * g.derivative(x - a) * gb - x * ga * g.derivative(b - x) - a * g.derivative(a - x)
        + b * g.derivative(x - b)
}

pub fn hard_clamp<F: Scalar>(x: F, bounds: ClampBounds<F>) -> F {
    x.min(bounds.b).max(bounds.a)
}

/// Subgradient of [`hard_clamp`]: 1 on the closed interval `[a, b]`, else 0.
pub fn hard_clamp_dx<F: Scalar>(x: F, bounds: ClampBounds<F>) -> F {
    if bounds.a <= x && x <= bounds.b {
        F::one()
    } else {
        F::zero()
    }
}

/// Clamp used by the quantizer's forward and backward passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClampMode<F> {
    Hard,
    Soft(GateFunction<F>),
}

impl<F: Scalar> ClampMode<F> {
    #[inline]
    pub fn apply(&self, x: F, bounds: ClampBounds<F>) -> F {
        match *self {
            Self::Hard => hard_clamp(x, bounds),
            Self::Soft(g) => soft_clamp(x, bounds, g),
        }
    }

    #[inline]
    pub fn derivative(&self, x: F, bounds: ClampBounds<F>) -> F {
        match *self {
            Self::Hard => hard_clamp_dx(x, bounds),
            Self::Soft(g) => soft_clamp_dx(x, bounds, g),
        }
    }

    pub fn is_soft(&self) -> bool {
        matches!(self, Self::Soft(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn b10() -> ClampBounds<f64> {
        ClampBounds::symmetric(10.0).unwrap()
    }

    const SIG: GateFunction<f64> = GateFunction::Logistic { beta: 1.0 };

    /// Direct transcription with naive logistic, used as an oracle.
    fn sig(u: f64) -> f64 {
        1.0 / (1.0 + (-u).exp())
    }

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gate_examples() {
        assert_eq!(gate(0.0, SIG), 0.5);
        assert!((gate(10.0, SIG) - 0.9999546).abs() < 1e-7);
        assert_eq!(gate(0.0, GateFunction::GaussianCdf), 0.5);
        assert!(GateFunction::logistic(0.0).is_err());
    }

    #[test]
    fn bounds_must_be_ordered() {
        assert!(ClampBounds::new(1.0, 1.0).is_err());
        assert!(ClampBounds::new(2.0, -1.0).is_err());
        assert!(ClampBounds::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn soft_clamp_examples() {
        assert_eq!(soft_clamp(0.0, b10(), SIG), 0.0);
        let at20 = 20.0 * sig(30.0) * sig(-10.0) - 10.0 * sig(-30.0) + 10.0 * sig(10.0);
        assert_relative_eq!(soft_clamp(20.0, b10(), SIG), at20, max_relative = 1e-14);
        assert!((at20 - 10.000454).abs() < 1e-6);
        let at5 = 5.0 * sig(15.0) * sig(5.0) - 10.0 * sig(-15.0) + 10.0 * sig(-5.0);
        assert_relative_eq!(soft_clamp(5.0, b10(), SIG), at5, max_relative = 1e-14);
        assert!((at5 - 5.03346).abs() < 1e-5);
    }

    #[test]
    fn soft_clamp_dx_examples() {
        let d0 = soft_clamp_dx(0.0, b10(), SIG);
        let fd0 = central(|x| soft_clamp(x, b10(), SIG), 0.0);
        assert!((d0 - fd0).abs() < 1e-8);
        assert!((d0 - 1.00082).abs() < 1e-5);
        let d20 = soft_clamp_dx(20.0, b10(), SIG);
        let fd20 = central(|x| soft_clamp(x, b10(), SIG), 20.0);
        assert!((d20 - fd20).abs() < 1e-9);
        assert!((d20 + 4.086e-4).abs() < 1e-6, "{d20}");
        assert!(soft_clamp_dx(-1e4, b10(), SIG).abs() < 1e-300);
    }

    #[test]
    fn hard_clamp_examples() {
        assert_eq!(hard_clamp(20.0, b10()), 10.0);
        assert_eq!(hard_clamp_dx(20.0, b10()), 0.0);
        assert_eq!(hard_clamp_dx(0.0, b10()), 1.0);
        assert_eq!(hard_clamp_dx(10.0, b10()), 1.0);
        assert_eq!(hard_clamp_dx(-10.0, b10()), 1.0);
    }

    #[test]
    fn deviation_from_hard_clamp_is_bounded() {
        for (lo, hi) in [(-10.0, 10.0), (-7.0, 13.0), (0.0, 30.0)] {
            let bounds = ClampBounds::new(lo, hi).unwrap();
            let mut x = lo - 15.0;
            while x <= hi + 15.0 {
                assert!((soft_clamp(x, bounds, SIG) - hard_clamp(x, bounds)).abs() <= 0.5, "x={x}");
                x += 1e-3;
            }
        }
    }

    #[test]
    fn settles_on_bounds() {
        for x in [30.0, 45.0, 200.0] {
            assert!((soft_clamp(x, b10(), SIG) - 10.0).abs() < 1e-6);
            assert!((soft_clamp(-x, b10(), SIG) + 10.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nondecreasing_between_the_extrema() {
        // Logistic(1), [-10, 10]: the extrema sit at +-11.2785
        let mut prev = f64::NEG_INFINITY;
        let mut k = 0;
        loop {
            let x = -11.25 + k as f64 * 1e-2;
            if x > 11.25 + 1e-9 {
                break;
            }
            let y = soft_clamp(x, b10(), SIG);
            assert!(y >= prev, "x={x}");
            prev = y;
            k += 1;
        }
    }

    #[test]
    fn overshoots_the_bound_once() {
        // bisection on the analytic slope
        let (mut lo, mut hi) = (11.0, 11.5);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if soft_clamp_dx(mid, b10(), SIG) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((lo - 11.278_464_580_075).abs() < 1e-9, "{lo}");
        let overshoot = soft_clamp(lo, b10(), SIG) - 10.0;
        assert!((overshoot - 0.278_464_535_611_5).abs() < 1e-9, "{overshoot}");
        assert!(soft_clamp_dx(12.0, b10(), SIG) < 0.0);
        assert!(soft_clamp_dx(-12.0, b10(), SIG) < 0.0);
    }

    #[test]
    fn gaussian_gate_derivative_matches_differences() {
        let g = GateFunction::GaussianCdf;
        for x in [-14.0, -9.5, -3.0, 0.0, 0.7, 9.9, 12.0] {
            let fd = central(|x| soft_clamp(x, b10(), g), x);
            let d = soft_clamp_dx(x, b10(), g);
            assert!((d - fd).abs() <= 1e-6 * d.abs().max(1e-4), "x={x}: {d} vs {fd}");
        }
    }

    proptest! {
        #[test]
        fn odd_for_symmetric_bounds(x in -40.0f64..40.0, c in 1.0f64..30.0, beta in 0.2f64..4.0) {
            let bounds = ClampBounds::symmetric(c).unwrap();
            for g in [GateFunction::Logistic { beta }, GateFunction::GaussianCdf] {
                let (p, n) = (soft_clamp(x, bounds, g), soft_clamp(-x, bounds, g));
                prop_assert!((p + n).abs() <= 1e-12 * p.abs().max(1.0));
            }
        }

        #[test]
        fn gate_is_point_symmetric(u in -50.0f64..50.0) {
            for g in [SIG, GateFunction::GaussianCdf] {
                let s = g.value(u) + g.value(-u);
                prop_assert!((s - 1.0).abs() < 1e-15);
            }
        }
    }
}
