//! Fake quantization `Q(x) = s * round(clamp(x / s, a, b))` with symmetric
//! restricted range `a = -b`, `b = 2^(N-1) - 1`.
//!
//! With `u = x / s`, `c = clamp(u)`, `m` the rounding multiplier at `c` and
//! `c'` the clamp derivative at `u`, the backward pass is
//!
//! ```text
//! dQ/dx = m c'
//! dQ/ds = k - m c' x / s        (k = the emitted integer code)
//! ```
//!
//! For a hard clamp with the pass-through estimator this is the familiar
//! learned-step-size gradient: `round(u) - u` inside the range and `+-b`
//! outside it. With a soft clamp the second term never vanishes, so the step
//! size keeps receiving gradient from saturated inputs.

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rounding::{round_forward, CodeRange, RoundingEstimator};
use crate::scalar::Scalar;
use crate::softclamp::{hard_clamp, hard_clamp_dx, soft_clamp, soft_clamp_dx, ClampBounds, ClampMode, GateFunction};

/// Scale used when a tensor is identically zero.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleMode {
    /// Recomputed from the input on every forward pass.
    MinMaxDynamic,
    /// A trained parameter, initialised once by MinMax.
    LearnableStatic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig<F> {
    bits: u32,
    pub scale_mode: ScaleMode,
    pub estimator: RoundingEstimator<F>,
    pub clamp: ClampMode<F>,
}

impl<F: Scalar> QuantConfig<F> {
    pub fn new(bits: u32, scale_mode: ScaleMode, estimator: RoundingEstimator<F>, clamp: ClampMode<F>) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::InvalidBits(bits));
        }
        Ok(Self { bits, scale_mode, estimator, clamp })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// `2^(N-1) - 1`
    pub fn qmax(&self) -> i64 {
        qmax(self.bits)
    }

    pub fn bounds(&self) -> ClampBounds<F> {
        ClampBounds::symmetric(F::of_int(self.qmax())).expect("qmax >= 1")
    }

    pub fn kernel(&self) -> QuantKernel<F> {
        QuantKernel::new(self.bounds(), self.estimator, self.clamp)
    }
}

pub fn qmax(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Elementwise quantizer: clamp bounds, code range, estimator and clamp mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantKernel<F> {
    pub bounds: ClampBounds<F>,
    pub range: CodeRange,
    pub estimator: RoundingEstimator<F>,
    pub clamp: ClampMode<F>,
}

/// Per-element intermediate values of the quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantPoint<F> {
    /// `clamp(x / s)`
    pub clamped: F,
    /// `d clamp / du` at `u = x / s`
    pub clamp_slope: F,
    /// rounding multiplier at `clamped`
    pub multiplier: F,
    /// integer code in the admissible range
    pub code: F,
}

impl<F: Scalar> QuantKernel<F> {
    /// Codes are restricted to the integers inside `bounds`.
    pub fn new(bounds: ClampBounds<F>, estimator: RoundingEstimator<F>, clamp: ClampMode<F>) -> Self {
        let lo = bounds.lower().ceil().to_i64().unwrap_or(i64::MIN);
        let hi = bounds.upper().floor().to_i64().unwrap_or(i64::MAX);
        Self { bounds, range: CodeRange::new(lo, hi), estimator, clamp }
    }

    #[inline]
    fn clip_code(&self, k: F) -> F {
        k.max(F::of_int(self.range.lo)).min(F::of_int(self.range.hi))
    }

    /// Integer code of `x` at scale `s`. Rounding a soft-clamped value may
    /// overshoot the range, so the code is clipped afterwards.
    #[inline]
    pub fn code(&self, x: F, s: F) -> F {
        self.clip_code(round_forward(self.clamp.apply(x / s, self.bounds)))
    }

    #[inline]
    pub fn point(&self, x: F, s: F) -> QuantPoint<F> {
        let u = x / s;
        let clamped = self.clamp.apply(u, self.bounds);
        QuantPoint {
            clamped,
            clamp_slope: self.clamp.derivative(u, self.bounds),
            multiplier: self.estimator.multiplier(clamped, self.range),
            code: self.clip_code(round_forward(clamped)),
        }
    }

    #[inline]
    pub fn forward(&self, x: F, s: F) -> F {
        s * self.code(x, s)
    }

    /// `(dQ/dx, dQ/ds)` scaled by `upstream`.
    #[inline]
    pub fn backward(&self, x: F, s: F, upstream: F) -> (F, F) {
        let p = self.point(x, s);
        let slope = p.multiplier * p.clamp_slope;
        (upstream * slope, upstream * (p.code - slope * x / s))
    }
}

fn check_scale<F: Scalar>(s: F) -> Result<()> {
    if s.is_finite() && s > F::zero() {
        Ok(())
    } else {
        Err(Error::NonPositiveScale(s.to_f64_lossy()))
    }
}

/// `max|X| / (2^(N-1) - 1)`, floored at [`SCALE_FLOOR`] for all-zero input.
pub fn minmax_scale<F: Scalar>(values: &[F], bits: u32) -> F {
    let amax = values.iter().fold(F::zero(), |m, v| m.max(v.abs()));
    let s = amax / F::of_int(qmax(bits));
    if s > F::zero() {
        s
    } else {
        F::lit(SCALE_FLOOR)
    }
}

pub fn fake_quant_forward<F: Scalar>(x: &Tensor<F>, cfg: &QuantConfig<F>, s: F) -> Result<Tensor<F>> {
    check_scale(s)?;
    let k = cfg.kernel();
    Ok(x.map(|v| k.forward(v, s)))
}

/// `(grad_x, grad_s)` for an upstream gradient of the same shape as `x`.
pub fn fake_quant_backward<F: Scalar>(
    x: &Tensor<F>,
    cfg: &QuantConfig<F>,
    s: F,
    upstream: &Tensor<F>,
) -> Result<(Tensor<F>, F)> {
    check_scale(s)?;
    if x.shape() != upstream.shape() {
        return Err(Error::ShapeMismatch { left: x.shape().to_vec(), right: upstream.shape().to_vec() });
    }
    let k = cfg.kernel();
    let mut gs = F::zero();
    let mut gx = Vec::with_capacity(x.len());
    for (&v, &g) in x.data().iter().zip(upstream.data()) {
        let (dx, ds) = k.backward(v, s, g);
        gx.push(dx);
        gs += ds;
    }
    Ok((Tensor::new(x.shape().to_vec(), gx)?, gs))
}

/// Integer codes of `x` and the scale they are expressed in. `codes * s`
/// reproduces [`fake_quant_forward`] exactly.
pub fn export_int_grid<F: Scalar>(x: &Tensor<F>, cfg: &QuantConfig<F>, s: F) -> Result<(Vec<i8>, F)> {
    check_scale(s)?;
    let k = cfg.kernel();
    let codes = x.data().iter().map(|&v| k.code(v, s).to_i64().expect("finite code") as i8).collect();
    Ok((codes, s))
}

/// `codes * s` as a tensor of the given shape.
pub fn dequantize<F: Scalar>(codes: &[i8], s: F, shape: Vec<usize>) -> Result<Tensor<F>> {
    Tensor::new(shape, codes.iter().map(|&c| s * F::of_int(c as i64)).collect())
}

/// Curves of the clamping part of the quantizer as a function of the scale,
/// for a fixed input `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClampCurve {
    /// `clamp(x / s)`
    Hard,
    /// `soft_clamp(x / s)`
    Soft,
    /// `d clamp(x / s) / ds`
    HardDs,
    /// `d soft_clamp(x / s) / ds`
    SoftDs,
}

pub fn clamp_curve<F: Scalar>(
    kind: ClampCurve,
    x: F,
    s_grid: &[F],
    bounds: ClampBounds<F>,
    gate: GateFunction<F>,
) -> Result<Vec<(F, F)>> {
    s_grid
        .iter()
        .map(|&s| {
            check_scale(s)?;
            let u = x / s;
            let du_ds = -x / (s * s);
            let v = match kind {
                ClampCurve::Hard => hard_clamp(u, bounds),
                ClampCurve::Soft => soft_clamp(u, bounds, gate),
                ClampCurve::HardDs => hard_clamp_dx(u, bounds) * du_ds,
                ClampCurve::SoftDs => soft_clamp_dx(u, bounds, gate) * du_ds,
            };
            Ok((s, v))
        })
        .collect()
}

/// Scale of one quantizer across training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerState<F> {
    pub scale: F,
    pub initialized: bool,
}

impl<F: Scalar> Default for QuantizerState<F> {
    fn default() -> Self {
        Self { scale: F::one(), initialized: false }
    }
}

impl<F: Scalar> QuantizerState<F> {
    /// Sets the scale by MinMax the first time it is called.
    pub fn ensure_initialized(&mut self, values: &[F], bits: u32) -> F {
        if !self.initialized {
            self.scale = minmax_scale(values, bits);
            self.initialized = true;
        }
        self.scale
    }

    /// Stores an updated scale, keeping it strictly positive.
    pub fn set_scale(&mut self, s: F) {
        self.scale = if s.is_finite() { s.max(F::lit(SCALE_FLOOR)) } else { F::lit(SCALE_FLOOR) };
    }
}

/// How dynamic scales are pooled over a 2-D input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    /// One scale per row (per token).
    PerRow,
}

/// Where the scale of a fake-quant node comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleSource {
    /// A one-element tape variable receiving the step-size gradient.
    Learned(Var),
    /// MinMax over the input; treated as a constant by the backward pass.
    Dynamic(Granularity),
}

/// Frozen per-node state captured by [`QuantTrace`] in record mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenQuant<F> {
    scales: Vec<F>,
    points: Vec<QuantPoint<F>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum TraceMode {
    #[default]
    Off,
    Record,
    Replay,
}

/// Optional instrumentation of fake-quant nodes.
///
/// In record mode every node stores its scales, codes, clamped values and
/// rounding multipliers. In replay mode each node instead evaluates the
/// straight-through surrogate linearised at the recorded point,
///
/// ```text
/// y = s * (k0 + m0 * (clamp(x / s) - c0))
/// ```
///
/// whose exact derivative at the recorded inputs equals the surrogate
/// backward pass. A hard clamp keeps its recorded regime (identity or
/// saturated), so the replayed forward is smooth everywhere and finite
/// differences of it check the analytic gradients of a quantized network.
#[derive(Debug, Clone, Default)]
pub struct QuantTrace<F> {
    mode: TraceMode,
    entries: Vec<FrozenQuant<F>>,
    cursor: usize,
}

impl<F: Scalar> QuantTrace<F> {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn record() -> Self {
        Self { mode: TraceMode::Record, ..Self::default() }
    }

    /// Switches a recorded trace to replay, rewound.
    pub fn into_replay(mut self) -> Self {
        self.mode = TraceMode::Replay;
        self.rewind();
        self
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

struct FakeQuantOp<F> {
    kernel: QuantKernel<F>,
    /// one per row, or a single entry
    scales: Vec<F>,
    row_len: usize,
    learned: bool,
    frozen: Option<Vec<QuantPoint<F>>>,
}

impl<F: Scalar> FakeQuantOp<F> {
    fn scale_at(&self, idx: usize) -> F {
        if self.scales.len() == 1 {
            self.scales[0]
        } else {
            self.scales[idx / self.row_len]
        }
    }
}

impl<F: Scalar> FakeQuantOp<F> {
    /// Clamp used by replay: the soft clamp itself, or the hard clamp held
    /// in its recorded regime.
    fn frozen_clamp(&self, u: F, p0: &QuantPoint<F>) -> F {
        match self.kernel.clamp {
            ClampMode::Soft(g) => soft_clamp(u, self.kernel.bounds, g),
            ClampMode::Hard if p0.clamp_slope > F::zero() => u,
            ClampMode::Hard => p0.clamped,
        }
    }
}

impl<F: Scalar> CustomOp<F> for FakeQuantOp<F> {
    fn name(&self) -> &str {
        "fake_quant"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _output: &Tensor<F>, upstream: &[F]) -> Vec<Option<Vec<F>>> {
        let x = inputs[0].data();
        let mut gx = Vec::with_capacity(x.len());
        let mut gs = F::zero();
        for (idx, (&v, &g)) in x.iter().zip(upstream).enumerate() {
            let s = self.scale_at(idx);
            let (dx, ds) = match &self.frozen {
                None => self.kernel.backward(v, s, g),
                Some(points) => {
                    let p0 = points[idx];
                    let u = v / s;
                    let c = self.frozen_clamp(u, &p0);
                    let clamp_slope = if self.kernel.clamp.is_soft() {
                        self.kernel.clamp.derivative(u, self.kernel.bounds)
                    } else {
                        p0.clamp_slope
                    };
                    let slope = p0.multiplier * clamp_slope;
                    (g * slope, g * (p0.code + p0.multiplier * (c - p0.clamped) - slope * u))
                }
            };
            gx.push(dx);
            gs += ds;
        }
        let mut out = vec![Some(gx)];
        if self.learned {
            out.push(Some(vec![gs]));
        }
        out
    }
}

/// Records a fake-quant node `s * round(clamp(x / s))` on the tape.
pub fn fake_quant<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    cfg: &QuantConfig<F>,
    source: ScaleSource,
    trace: &mut QuantTrace<F>,
) -> Result<Var> {
    let kernel = cfg.kernel();
    let xt = tape.value(x);
    let row_len = xt.dims2().map(|(_, c)| c).unwrap_or(xt.len()).max(1);
    let replay = match trace.mode {
        TraceMode::Replay => {
            let entry = trace
                .entries
                .get(trace.cursor)
                .cloned()
                .ok_or_else(|| Error::Config("quant trace exhausted during replay".into()))?;
            trace.cursor += 1;
            Some(entry)
        }
        _ => None,
    };
    let (scales, learned, inputs) = match source {
        ScaleSource::Learned(sv) => {
            let s = tape.value(sv).item();
            check_scale(s)?;
            (vec![s], true, vec![x, sv])
        }
        ScaleSource::Dynamic(g) => {
            let scales = match (&replay, g) {
                (Some(e), _) => e.scales.clone(),
                (None, Granularity::PerTensor) => vec![minmax_scale(xt.data(), cfg.bits())],
                (None, Granularity::PerRow) => xt.data().chunks(row_len).map(|r| minmax_scale(r, cfg.bits())).collect(),
            };
            (scales, false, vec![x])
        }
    };
    let mut op = FakeQuantOp { kernel, scales, row_len, learned, frozen: None };
    let xt = tape.value(x);
    let value = match replay {
        Some(entry) => {
            let data = xt
                .data()
                .iter()
                .zip(&entry.points)
                .enumerate()
                .map(|(idx, (&v, p0))| {
                    let s = op.scale_at(idx);
                    s * (p0.code + p0.multiplier * (op.frozen_clamp(v / s, p0) - p0.clamped))
                })
                .collect();
            op.frozen = Some(entry.points);
            Tensor::new(xt.shape().to_vec(), data)?
        }
        None => {
            let points: Vec<QuantPoint<F>> =
                xt.data().iter().enumerate().map(|(idx, &v)| kernel.point(v, op.scale_at(idx))).collect();
            let data = points.iter().enumerate().map(|(idx, p)| op.scale_at(idx) * p.code).collect();
            if trace.mode == TraceMode::Record {
                trace.entries.push(FrozenQuant { scales: op.scales.clone(), points });
            }
            Tensor::new(xt.shape().to_vec(), data)?
        }
    };
    Ok(tape.custom(&inputs, value, Box::new(op)))
}
