use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: Scalar> Default for AdamConfig<F> {
    fn default() -> Self {
        Self { lr: F::lit(1e-3), beta1: F::lit(0.9), beta2: F::lit(0.999), eps: F::lit(1e-8) }
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn zeros(len: usize) -> Self {
        Self { m: vec![F::zero(); len], v: vec![F::zero(); len], step: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<F: Scalar>(
    params: &mut [F],
    grads: &[F],
    state: &mut AdamState<F>,
    cfg: &AdamConfig<F>,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch { left: vec![params.len()], right: vec![grads.len()] });
    }
    state.step += 1;
    let t = state.step as i32;
    let one = F::one();
    let c1 = one - cfg.beta1.powi(t);
    let c2 = one - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (one - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (one - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![1.5, -2.0, 0.25];
        let mut st = AdamState::zeros(3);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0; 3], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg: AdamConfig<f64> = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        for g in [3.0_f64, -0.2, 1e-3] {
            let mut p = vec![0.0];
            let mut st = AdamState::zeros(1);
            adam_step(&mut p, &[g], &mut st, &cfg).unwrap();
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p[0] - expected).abs() < 1e-15);
            assert!((p[0] + cfg.lr * g.signum()).abs() <= cfg.lr * cfg.eps / g.abs() + 1e-15);
        }
    }

    /// Scalar recurrence for f(w) = (w - 3)^2, written out longhand.
    fn quadratic_oracle(steps: usize, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8_f64);
        let (mut w, mut m, mut v) = (0.0_f64, 0.0_f64, 0.0_f64);
        for t in 1..=steps {
            let g = 2.0 * (w - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn hundred_steps_on_quadratic_converge() {
        let expected = quadratic_oracle(100, 0.1);
        assert!((expected - 3.0).abs() < 0.1, "oracle itself reached {expected}");
        let mut w = vec![0.0];
        let mut st = AdamState::zeros(1);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        for _ in 0..100 {
            let g = [2.0 * (w[0] - 3.0)];
            adam_step(&mut w, &g, &mut st, &cfg).unwrap();
        }
        assert_eq!(w[0], expected);
        assert!((w[0] - 3.0).abs() < 0.1);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut p = vec![0.0; 2];
        let mut st = AdamState::zeros(2);
        assert!(adam_step(&mut p, &[1.0], &mut st, &AdamConfig::default()).is_err());
    }
}
