//! Central finite differences and gradient comparison.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{Batch, TinyLm};
use crate::quantizer::QuantTrace;

/// Acceptance rule for one analytic/numeric pair: relative error at most
/// `rel`, except where `|analytic| < small`, which is judged by absolute
/// error at most `abs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
    pub small: f64,
}

impl Tolerance {
    /// `1e-6` relative, `1e-8` absolute below `1e-4`.
    pub const SMOOTH: Tolerance = Tolerance { rel: 1e-6, abs: 1e-8, small: 1e-4 };
    /// `1e-4` relative, for piecewise paths with exclusion zones.
    pub const PIECEWISE: Tolerance = Tolerance { rel: 1e-4, abs: 1e-8, small: 1e-4 };
    /// Whole-network gradients.
    pub const NETWORK: Tolerance = Tolerance { rel: 1e-5, abs: 1e-8, small: 1e-4 };

    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        if analytic.abs() < self.small {
            diff <= self.abs
        } else {
            diff <= self.rel * analytic.abs().max(numeric.abs())
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// `(f(x + h) - f(x - h)) / 2h`
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Running summary of analytic/numeric comparisons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub tolerance: Tolerance,
    pub points: usize,
    pub failures: usize,
    pub max_rel: f64,
    pub max_abs: f64,
}

impl Comparison {
    pub fn new(tolerance: Tolerance) -> Self {
        Self { tolerance, points: 0, failures: 0, max_rel: 0.0, max_abs: 0.0 }
    }

    pub fn add(&mut self, analytic: f64, numeric: f64) -> bool {
        self.points += 1;
        let ok = self.tolerance.accepts(analytic, numeric) && analytic.is_finite() && numeric.is_finite();
        if !ok {
            self.failures += 1;
        }
        let abs = (analytic - numeric).abs();
        self.max_abs = self.max_abs.max(if abs.is_nan() { f64::INFINITY } else { abs });
        if analytic.abs() >= self.tolerance.small {
            self.max_rel = self.max_rel.max(relative_error(analytic, numeric));
        }
        ok
    }

    pub fn merge(&mut self, other: &Comparison) {
        self.points += other.points;
        self.failures += other.failures;
        self.max_rel = self.max_rel.max(other.max_rel);
        self.max_abs = self.max_abs.max(other.max_abs);
    }

    pub fn passed(&self) -> bool {
        self.points > 0 && self.failures == 0
    }
}

/// Compares tape gradients of a scalar function of several tensors with
/// central differences on every input element.
///
/// `build` records the function on the tape and returns its scalar output.
pub fn check_tape_gradients(
    inputs: &[Tensor<f64>],
    h: f64,
    tolerance: Tolerance,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<Comparison> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut cmp = Comparison::new(tolerance);
    let mut work = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[ti].len()]);
        #[allow(clippy::needless_range_loop)]
        for k in 0..inputs[ti].len() {
            let x0 = inputs[ti].data()[k];
            work[ti].data_mut()[k] = x0 + h;
            let up = eval(&work)?;
            work[ti].data_mut()[k] = x0 - h;
            let down = eval(&work)?;
            work[ti].data_mut()[k] = x0;
            cmp.add(analytic[k], (up - down) / (2.0 * h));
        }
    }
    Ok(cmp)
}

/// Vector-Jacobian check of a tensor-valued function.
///
/// The analytic side back-propagates the fixed cotangent `w` (from
/// `cotangent(output_len)`). The numeric side differences every output
/// element before contracting with `w`, so roundoff in unrelated outputs does
/// not leak into the quotient.
pub fn check_vjp(
    inputs: &[Tensor<f64>],
    h: f64,
    tolerance: Tolerance,
    cotangent: impl Fn(usize) -> Vec<f64>,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<Comparison> {
    let eval = |xs: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let w = cotangent(tape.value(out).len());
    let wv = tape.constant(Tensor::new(shape, w.clone())?);
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;
    let mut cmp = Comparison::new(tolerance);
    let mut work = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[ti].len()]);
        #[allow(clippy::needless_range_loop)]
        for k in 0..inputs[ti].len() {
            let x0 = inputs[ti].data()[k];
            work[ti].data_mut()[k] = x0 + h;
            let up = eval(&work)?;
            work[ti].data_mut()[k] = x0 - h;
            let down = eval(&work)?;
            work[ti].data_mut()[k] = x0;
            let numeric: f64 =
                up.data().iter().zip(down.data()).zip(&w).map(|((u, d), w)| w * (u - d)).sum::<f64>() / (2.0 * h);
            cmp.add(analytic[k], numeric);
        }
    }
    Ok(cmp)
}

/// Compares the gradient of `model`'s mean loss on `batch` with central
/// differences at the given `(parameter index, element)` targets.
///
/// Fake-quant nodes are recorded at the current parameters and replayed, so
/// the numeric side differentiates the straight-through surrogate that the
/// backward pass implements (see [`QuantTrace`]).
pub fn check_model_gradients(
    model: &TinyLm<f64>,
    batch: &Batch,
    targets: &[(usize, usize)],
    h: f64,
    tolerance: Tolerance,
) -> Result<Comparison> {
    let mut rec = QuantTrace::record();
    let (_, grads) = model.loss_and_grads(batch, &mut rec)?;
    let mut trace = rec.into_replay();
    let mut work = model.clone();
    let mut cmp = Comparison::new(tolerance);
    for &(p, k) in targets {
        let x0 = work
            .params()
            .iter()
            .nth(p)
            .and_then(|param| param.value.data().get(k).copied())
            .ok_or(Error::IndexOutOfRange { index: p, classes: grads.len() })?;
        let mut eval = |x: f64| -> Result<f64> {
            work.params_mut().iter_mut().nth(p).expect("checked above").value.data_mut()[k] = x;
            trace.rewind();
            work.loss(batch, &mut trace)
        };
        let up = eval(x0 + h)?;
        let down = eval(x0 - h)?;
        eval(x0)?;
        cmp.add(grads[p].data()[k], (up - down) / (2.0 * h));
    }
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_switches_to_absolute_for_small_gradients() {
        let t = Tolerance::SMOOTH;
        assert!(t.accepts(1.0, 1.0 + 5e-7));
        assert!(!t.accepts(1.0, 1.0 + 5e-6));
        assert!(t.accepts(1e-6, 1e-6 + 5e-9));
        assert!(!t.accepts(1e-6, 1e-6 + 5e-8));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::from_vec(vec![0.3, -1.2]);
        let good = check_tape_gradients(std::slice::from_ref(&x), 1e-6, Tolerance::SMOOTH, |t, v| {
            let e = t.exp(v[0]);
            t.sum(e)
        })
        .unwrap();
        assert!(good.passed(), "{good:?}");
        // sigmoid's analytic slope compared against the numeric slope of exp
        let mut cmp = Comparison::new(Tolerance::SMOOTH);
        cmp.add(0.25, central_difference(f64::exp, 0.0, 1e-6));
        assert!(!cmp.passed());
    }
}
