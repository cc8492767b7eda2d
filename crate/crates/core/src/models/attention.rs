use super::{ParamSet, QuantLinear};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::quantizer::{fake_quant, Granularity, QuantConfig, QuantTrace, ScaleSource};
use crate::scalar::Scalar;

/// Single-head causal self-attention whose keys and values are
/// fake-quantized before use.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyAttention<F> {
    pub dim: usize,
    pub wq: QuantLinear<F>,
    pub wk: QuantLinear<F>,
    pub wv: QuantLinear<F>,
    pub wo: QuantLinear<F>,
    pub kv_q: Option<QuantConfig<F>>,
}

pub struct AttentionOutput {
    pub output: Var,
    /// Attention weights, one `[seq x seq]` matrix per sequence.
    pub probs: Vec<Var>,
}

/// Quantized keys and values of the tokens decoded so far.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvCache<F> {
    keys: Vec<F>,
    values: Vec<F>,
    len: usize,
}

impl<F: Scalar> KvCache<F> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<F: Scalar> TinyAttention<F> {
    pub fn new(
        params: &mut ParamSet<F>,
        name: &str,
        dim: usize,
        weight_q: Option<QuantConfig<F>>,
        act_q: Option<QuantConfig<F>>,
        kv_q: Option<QuantConfig<F>>,
        init: &mut dyn FnMut() -> f64,
    ) -> Result<Self> {
        let mut proj =
            |p: &str| QuantLinear::new(params, &format!("{name}.{p}"), dim, dim, false, weight_q, act_q, init);
        Ok(Self { dim, wq: proj("wq")?, wk: proj("wk")?, wv: proj("wv")?, wo: proj("wo")?, kv_q })
    }

    fn quantize_kv(&self, tape: &mut Tape<F>, t: Var, trace: &mut QuantTrace<F>) -> Result<Var> {
        match &self.kv_q {
            Some(cfg) => fake_quant(tape, t, cfg, ScaleSource::Dynamic(Granularity::PerRow), trace),
            None => Ok(t),
        }
    }

    fn inv_sqrt_dim(&self) -> F {
        F::one() / F::from_usize(self.dim).unwrap().sqrt()
    }

    /// `x` stacks `batch` sequences of `seq` rows each.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x: Var,
        batch: usize,
        seq: usize,
        trace: &mut QuantTrace<F>,
    ) -> Result<AttentionOutput> {
        let rows = tape.value(x).dims2().map(|(r, _)| r).unwrap_or(0);
        if rows != batch * seq {
            return Err(Error::ShapeMismatch {
                left: tape.value(x).shape().to_vec(),
                right: vec![batch * seq, self.dim],
            });
        }
        let q = self.wq.forward(tape, vars, x, trace)?;
        let k = self.wk.forward(tape, vars, x, trace)?;
        let v = self.wv.forward(tape, vars, x, trace)?;
        let k = self.quantize_kv(tape, k, trace)?;
        let v = self.quantize_kv(tape, v, trace)?;
        let mut outs = Vec::with_capacity(batch);
        let mut probs = Vec::with_capacity(batch);
        for b in 0..batch {
            let qb = tape.slice_rows(q, b * seq, seq)?;
            let kb = tape.slice_rows(k, b * seq, seq)?;
            let vb = tape.slice_rows(v, b * seq, seq)?;
            let kt = tape.transpose(kb)?;
            let scores = tape.matmul(qb, kt)?;
            let scores = tape.scale(scores, self.inv_sqrt_dim());
            let p = tape.causal_softmax(scores, 0)?;
            outs.push(tape.matmul(p, vb)?);
            probs.push(p);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs)? };
        let output = self.wo.forward(tape, vars, merged, trace)?;
        Ok(AttentionOutput { output, probs })
    }

    /// Attends one new row `x[1 x dim]` over the cache, appending its
    /// quantized key and value first.
    pub fn decode(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x: Var,
        cache: &mut KvCache<F>,
        trace: &mut QuantTrace<F>,
    ) -> Result<Var> {
        let q = self.wq.forward(tape, vars, x, trace)?;
        let k = self.wk.forward(tape, vars, x, trace)?;
        let v = self.wv.forward(tape, vars, x, trace)?;
        let k = self.quantize_kv(tape, k, trace)?;
        let v = self.quantize_kv(tape, v, trace)?;
        cache.keys.extend_from_slice(tape.value(k).data());
        cache.values.extend_from_slice(tape.value(v).data());
        cache.len += 1;
        let keys = tape.constant(Tensor::matrix(cache.len, self.dim, cache.keys.clone())?);
        let values = tape.constant(Tensor::matrix(cache.len, self.dim, cache.values.clone())?);
        let kt = tape.transpose(keys)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, self.inv_sqrt_dim());
        let p = tape.causal_softmax(scores, cache.len - 1)?;
        let o = tape.matmul(p, values)?;
        self.wo.forward(tape, vars, o, trace)
    }
}
