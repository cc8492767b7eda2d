//! Finite-difference gradient checks across the autodiff tape, the soft
//! clamp, the rounding estimator, the quantizer and the language model.
//!
//! Smooth functions are held to relative error `1e-6` (absolute `1e-8` where
//! the analytic value is below `1e-4`); paths through rounding or hard
//! clamping to `1e-4`, with the stated exclusion zones. Quantized paths are
//! differenced through the straight-through surrogate frozen at the point.

use std::path::{Path, PathBuf};

use anyhow::Context;
use qat_core::autodiff::{AdamConfig, Tape, Tensor, Var};
use qat_core::gradcheck::{central_difference, check_model_gradients, check_vjp, Comparison, Tolerance};
use qat_core::models::{Batch, ModelConfig, ModelOptimizer, ParamRole, QuantLayout, TinyLm};
use qat_core::quantizer::{fake_quant_backward, QuantConfig, QuantTrace, ScaleMode};
use qat_core::rounding::{sigmoid_ste_window_value, CodeRange, RoundingEstimator};
use qat_core::softclamp::{soft_clamp, ClampBounds, ClampMode, GateFunction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::table::{float, Table};

pub const H: f64 = 1e-6;
const DRAWS: usize = 100;

pub type SoftClampDx = fn(f64, ClampBounds<f64>, GateFunction<f64>) -> f64;

/// Knobs of the suite. `soft_clamp_dx` is the analytic slope under test, so
/// a deliberately broken one can be swapped in.
#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub seed: u64,
    pub soft_clamp_dx: SoftClampDx,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { seed: 0x5eed, soft_clamp_dx: qat_core::softclamp::soft_clamp_dx }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub comparison: Comparison,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.comparison.passed()
    }
}

type Inputs = Vec<Tensor<f64>>;

fn tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).expect("consistent shape")
}

/// `DRAWS` random inputs from `make`, each checked with a fresh random
/// cotangent.
fn tape_check(
    rng: &mut ChaCha8Rng,
    make: impl Fn(&mut ChaCha8Rng) -> Inputs,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> qat_core::Result<Var>,
) -> anyhow::Result<Comparison> {
    let mut total = Comparison::new(Tolerance::SMOOTH);
    for _ in 0..DRAWS {
        let inputs = make(rng);
        let seed = rng.gen();
        let cotangent = |n: usize| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
        };
        total.merge(&check_vjp(&inputs, H, Tolerance::SMOOTH, cotangent, &build)?);
    }
    Ok(total)
}

fn tape_checks(rng: &mut ChaCha8Rng) -> anyhow::Result<Vec<CheckResult>> {
    let pair = |r: &mut ChaCha8Rng| vec![tensor(r, 2, 3, -2.0, 2.0), tensor(r, 2, 3, -2.0, 2.0)];
    let one = |lo: f64, hi: f64| move |r: &mut ChaCha8Rng| vec![tensor(r, 2, 3, lo, hi)];
    let mut out = Vec::new();
    let mut push = |name, c: anyhow::Result<Comparison>| -> anyhow::Result<()> {
        out.push(CheckResult { name, comparison: c? });
        Ok(())
    };
    push(
        "tape.add_sub_mul",
        tape_check(rng, pair, |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(a, v[1])?;
            let c = t.mul(b, v[1])?;
            t.sub(c, v[0])
        }),
    )?;
    push(
        "tape.div",
        tape_check(
            rng,
            |r| {
                let mut b = tensor(r, 2, 3, 0.5, 2.0);
                b.data_mut().iter_mut().for_each(|x| *x *= if r.gen_bool(0.5) { -1.0 } else { 1.0 });
                vec![tensor(r, 2, 3, -2.0, 2.0), b, Tensor::scalar(r.gen_range(0.5..2.0))]
            },
            |t, v| {
                let q = t.div(v[0], v[1])?;
                t.div(q, v[2])
            },
        ),
    )?;
    push(
        "tape.exp_log",
        tape_check(rng, one(0.5, 3.0), |t, v| {
            let e = t.exp(v[0]);
            let l = t.log(v[0]);
            let s = t.scale(l, 1.5);
            t.add(e, s)
        }),
    )?;
    push(
        "tape.sigmoid_silu",
        tape_check(rng, one(-4.0, 4.0), |t, v| {
            let s = t.sigmoid(v[0]);
            let u = t.silu(v[0]);
            let n = t.neg(u);
            let a = t.add_const(n, 0.5);
            t.mul(s, a)
        }),
    )?;
    push(
        "tape.matmul_transpose",
        tape_check(
            rng,
            |r| vec![tensor(r, 3, 4, -2.0, 2.0), tensor(r, 5, 4, -2.0, 2.0)],
            |t, v| {
                let bt = t.transpose(v[1])?;
                t.matmul(v[0], bt)
            },
        ),
    )?;
    push(
        "tape.reductions",
        tape_check(rng, one(-2.0, 2.0), |t, v| {
            let (sum, mean) = (t.sum(v[0])?, t.mean(v[0])?);
            let (max, amax) = (t.max(v[0])?, t.amax(v[0])?);
            let a = t.scale(mean, 3.0);
            let b = t.scale(max, -2.0);
            let c = t.add(sum, a)?;
            let d = t.add(b, amax)?;
            t.mul(c, d)
        }),
    )?;
    push(
        "tape.indexing",
        tape_check(
            rng,
            |r| vec![tensor(r, 5, 3, -2.0, 2.0), Tensor::from_vec((0..3).map(|_| r.gen_range(-1.0..1.0)).collect())],
            |t, v| {
                let e = t.embedding(v[0], &[4, 0, 4, 2])?;
                let s = t.slice_rows(v[0], 1, 2)?;
                let c = t.concat_rows(&[e, s])?;
                t.add_row(c, v[1])
            },
        ),
    )?;
    push(
        "tape.causal_softmax",
        tape_check(
            rng,
            |r| vec![tensor(r, 4, 6, -3.0, 3.0)],
            |t, v| {
                let a = t.causal_softmax(v[0], 0)?;
                let b = t.causal_softmax(v[0], 2)?;
                t.add(a, b)
            },
        ),
    )?;
    push(
        "tape.cross_entropy",
        tape_check(rng, |r| vec![tensor(r, 3, 5, -3.0, 3.0)], |t, v| t.softmax_cross_entropy(v[0], &[4, 0, 2])),
    )?;
    Ok(out)
}

/// `(anchor, rest)` with `soft_clamp(x) = anchor + rest(x)`, the anchor
/// being the bound on the side of `x0`. Near saturation `rest` is small, so
/// differencing it keeps full precision where `soft_clamp` itself has
/// already rounded to the bound.
fn anchored_soft_clamp(x0: f64, bounds: ClampBounds<f64>, g: GateFunction<f64>) -> (f64, impl Fn(f64) -> f64) {
    let (a, b) = (bounds.lower(), bounds.upper());
    let upper = x0 > 0.5 * (a + b);
    let rest = move |x: f64| {
        if upper {
            g.value(b - x) * (x - b) + g.value(a - x) * (a - x * g.value(b - x))
        } else {
            g.value(x - a) * (x - a) + g.value(x - b) * (b - x * g.value(x - a))
        }
    };
    (if upper { b } else { a }, rest)
}

fn soft_clamp_check(rng: &mut ChaCha8Rng, gate: GateFunction<f64>, dx: SoftClampDx) -> anyhow::Result<Comparison> {
    let mut cmp = Comparison::new(Tolerance::SMOOTH);
    for _ in 0..1000 {
        let a = rng.gen_range(-15.0..-1.0);
        let b = a + rng.gen_range(2.0..25.0);
        let bounds = ClampBounds::new(a, b)?;
        let x = rng.gen_range(a - 15.0..b + 15.0);
        let (anchor, rest) = anchored_soft_clamp(x, bounds, gate);
        debug_assert!((anchor + rest(x) - soft_clamp(x, bounds, gate)).abs() < 1e-12);
        cmp.add(dx(x, bounds, gate), central_difference(rest, x, H));
    }
    Ok(cmp)
}

/// Multiplier against the negated slope of the windowed value sum, away
/// from integers.
fn estimator_consistency(rng: &mut ChaCha8Rng) -> anyhow::Result<Comparison> {
    let mut cmp = Comparison::new(Tolerance::PIECEWISE);
    for t in [5.0, 10.0] {
        let est = RoundingEstimator::sigmoid(t)?;
        while cmp.points < if t == 5.0 { 500 } else { 1000 } {
            let x: f64 = rng.gen_range(0.2..4.8);
            if (x - x.round()).abs() < 1e-3 {
                continue;
            }
            let value = |x| sigmoid_ste_window_value(x, t, CodeRange::UNBOUNDED);
            cmp.add(est.multiplier(x, CodeRange::UNBOUNDED), -central_difference(value, x, H));
        }
    }
    Ok(cmp)
}

/// Straight-through surrogate frozen at `(x0, s0)`,
/// `y(x, s) = s k0 + s m0 (clamp(x / s) - c0)`, with a hard clamp held in its
/// recorded regime. Returns `k0` and the second term, the only one that
/// needs differencing.
fn surrogate(cfg: &QuantConfig<f64>, x0: f64, s0: f64) -> (f64, impl Fn(f64, f64) -> f64) {
    let kernel = cfg.kernel();
    let q = cfg.qmax() as f64;
    let bounds = cfg.bounds();
    let u0 = x0 / s0;
    let c0 = kernel.clamp.apply(u0, bounds);
    let k0 = c0.round().clamp(-q, q);
    let m0 = kernel.estimator.multiplier(c0, kernel.range);
    let inside = u0.abs() <= q;
    let soft = match kernel.clamp {
        ClampMode::Soft(g) => Some(anchored_soft_clamp(u0, bounds, g).1),
        ClampMode::Hard => None,
    };
    let rest = move |x: f64, s: f64| {
        let delta = match (&soft, inside) {
            (Some(r), _) => r(x / s) - r(u0),
            (None, true) => x / s - u0,
            (None, false) => 0.0,
        };
        s * m0 * delta
    };
    (k0, rest)
}

/// Analytic fake-quant gradients against differences of the frozen
/// surrogate, at random `(x, s)` and upstream gradient. Hard-clamp points
/// within `1e-3` of a bound are excluded.
fn quantizer_check(rng: &mut ChaCha8Rng, soft_only: bool) -> anyhow::Result<(Comparison, Comparison)> {
    let mut gx_cmp = Comparison::new(Tolerance::PIECEWISE);
    let mut gs_cmp = Comparison::new(Tolerance::PIECEWISE);
    let soft = ClampMode::Soft(GateFunction::Logistic { beta: 1.0 });
    let clamps: &[ClampMode<f64>] = if soft_only { &[soft] } else { &[ClampMode::Hard, soft] };
    for &clamp in clamps {
        for bits in [2, 4, 8] {
            for t in [0.0, 5.0, 10.0, 100.0] {
                let cfg =
                    QuantConfig::new(bits, ScaleMode::LearnableStatic, RoundingEstimator::from_temperature(t)?, clamp)?;
                let q = cfg.qmax() as f64;
                let mut n = 0;
                while n < 50 {
                    let s = rng.gen_range(0.1..2.0);
                    let x = rng.gen_range(-2.0 * q * s..2.0 * q * s);
                    if !clamp.is_soft() && ((x / s).abs() - q).abs() < 1e-3 {
                        continue;
                    }
                    let up = rng.gen_range(-2.0..2.0);
                    let (gx, gs) =
                        fake_quant_backward(&Tensor::from_vec(vec![x]), &cfg, s, &Tensor::from_vec(vec![up]))?;
                    let (k0, f) = surrogate(&cfg, x, s);
                    gx_cmp.add(gx.item(), up * central_difference(|x| f(x, s), x, H));
                    gs_cmp.add(gs, up * (k0 + central_difference(|s| f(x, s), s, H)));
                    n += 1;
                }
            }
        }
    }
    Ok((gx_cmp, gs_cmp))
}

fn mini_batch(rng: &mut ChaCha8Rng, vocab: usize) -> anyhow::Result<Batch> {
    let windows: Vec<Vec<usize>> = (0..2).map(|_| (0..5).map(|_| rng.gen_range(0..vocab)).collect()).collect();
    Ok(Batch::from_windows(&windows)?)
}

/// 20 random weight entries plus every learned scale of a ~500-parameter
/// model, after a few optimizer steps.
fn model_check(rng: &mut ChaCha8Rng, layout: QuantLayout<f64>, tol: Tolerance) -> anyhow::Result<Comparison> {
    let config = ModelConfig { vocab: 6, dim: 8, context: 4, ffn_hidden: 8 };
    let mut model = TinyLm::new(config, layout, &mut || rng.gen_range(-1.0..1.0))?;
    let batch = mini_batch(rng, config.vocab)?;
    let mut opt = ModelOptimizer::new(&model, AdamConfig::default(), 1e-3);
    for _ in 0..3 {
        let (_, g) = model.loss_and_grads(&batch, &mut QuantTrace::off())?;
        opt.step(&mut model, &g)?;
    }
    let params: Vec<_> = model.params().iter().map(|p| (p.role, p.value.len())).collect();
    let mut targets: Vec<(usize, usize)> =
        (0..params.len()).filter(|&i| params[i].0 == ParamRole::Scale).map(|i| (i, 0)).collect();
    let weights: Vec<usize> = (0..params.len()).filter(|&i| params[i].0 == ParamRole::Weight).collect();
    for _ in 0..20 {
        let p = weights[rng.gen_range(0..weights.len())];
        targets.push((p, rng.gen_range(0..params[p].1)));
    }
    Ok(check_model_gradients(&model, &batch, &targets, H, tol)?)
}

pub fn run_suite(opts: &SuiteOptions) -> anyhow::Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = tape_checks(&mut rng)?;
    let logistic = GateFunction::Logistic { beta: 1.0 };
    out.push(CheckResult {
        name: "softclamp.dx_logistic",
        comparison: soft_clamp_check(&mut rng, logistic, opts.soft_clamp_dx)?,
    });
    out.push(CheckResult {
        name: "softclamp.dx_gaussian_cdf",
        comparison: soft_clamp_check(&mut rng, GateFunction::GaussianCdf, opts.soft_clamp_dx)?,
    });
    out.push(CheckResult { name: "rounding.value_consistency", comparison: estimator_consistency(&mut rng)? });
    let (gx, _) = quantizer_check(&mut rng, false)?;
    out.push(CheckResult { name: "quantizer.grad_x", comparison: gx });
    let (_, gs) = quantizer_check(&mut rng, true)?;
    out.push(CheckResult { name: "quantizer.grad_s_soft", comparison: gs });
    out.push(CheckResult {
        name: "model.full_precision",
        comparison: model_check(&mut rng, QuantLayout::full_precision(), Tolerance::NETWORK)?,
    });
    // At T = 100 each frozen multiplier reaches 25 and they compound through
    // the network, so the surrogate curves too sharply for h = 1e-6.
    let soft = ClampMode::Soft(GateFunction::Logistic { beta: 1.0 });
    let mut quantized =
        model_check(&mut rng, QuantLayout::w4a8kv4(RoundingEstimator::sigmoid(10.0)?, soft)?, Tolerance::PIECEWISE)?;
    quantized.merge(&model_check(
        &mut rng,
        QuantLayout::w4a8kv4(RoundingEstimator::PassThrough, ClampMode::Hard)?,
        Tolerance::PIECEWISE,
    )?);
    out.push(CheckResult { name: "model.w4a8kv4", comparison: quantized });
    Ok(out)
}

pub fn report_table(results: &[CheckResult]) -> Table {
    let mut t =
        Table::new(["check", "points", "failures", "max_rel_err", "max_abs_err", "tol_rel", "tol_abs", "passed"]);
    for r in results {
        let c = &r.comparison;
        t.push(vec![
            r.name.to_string(),
            c.points.to_string(),
            c.failures.to_string(),
            float(c.max_rel),
            float(c.max_abs),
            float(c.tolerance.rel),
            float(c.tolerance.abs),
            r.passed().to_string(),
        ]);
    }
    t
}

/// Runs the suite and writes `gradcheck.csv` into `dir`.
pub fn cmd_gradcheck(dir: &Path, opts: &SuiteOptions) -> anyhow::Result<(Vec<CheckResult>, PathBuf)> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let results = run_suite(opts)?;
    let path = dir.join("gradcheck.csv");
    report_table(&results).write(&path)?;
    Ok((results, path))
}
