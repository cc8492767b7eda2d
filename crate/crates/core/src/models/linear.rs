use super::{ParamId, ParamRole, ParamSet};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::quantizer::{
    dequantize, export_int_grid, fake_quant, Granularity, QuantConfig, QuantTrace, QuantizerState, ScaleSource,
};
use crate::scalar::Scalar;

/// `y = Q_act(x) Q_w(W)^T + b` with full-precision master weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLinear<F> {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub weight_q: Option<(QuantConfig<F>, ParamId)>,
    pub act_q: Option<QuantConfig<F>>,
    /// Weight already holds dequantized codes; skip its quantizer.
    pub weight_frozen: bool,
}

impl<F: Scalar> QuantLinear<F> {
    /// Registers `name.weight` (uniform in `+-1/sqrt(in)`), an optional
    /// `name.bias` and, when weights are quantized, `name.weight_scale`
    /// initialised by MinMax.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        weight_q: Option<QuantConfig<F>>,
        act_q: Option<QuantConfig<F>>,
        init: &mut dyn FnMut() -> f64,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<F> = (0..in_dim * out_dim).map(|_| F::lit(init() * bound)).collect();
        let weight_tensor = Tensor::matrix(out_dim, in_dim, w)?;
        let weight_q = weight_q.map(|cfg| {
            let mut st = QuantizerState::default();
            let s = st.ensure_initialized(weight_tensor.data(), cfg.bits());
            (cfg, params.push(format!("{name}.weight_scale"), Tensor::scalar(s), ParamRole::Scale))
        });
        let weight = params.push(format!("{name}.weight"), weight_tensor, ParamRole::Weight);
        let bias = bias.then(|| params.push(format!("{name}.bias"), Tensor::zeros(vec![out_dim]), ParamRole::Weight));
        Ok(Self { name: name.to_string(), in_dim, out_dim, weight, bias, weight_q, act_q, weight_frozen: false })
    }

    pub fn forward(&self, tape: &mut Tape<F>, vars: &[Var], x: Var, trace: &mut QuantTrace<F>) -> Result<Var> {
        let (_, cols) = tape
            .value(x)
            .dims2()
            .ok_or_else(|| Error::ShapeMismatch { left: tape.value(x).shape().to_vec(), right: vec![self.in_dim] })?;
        if cols != self.in_dim || tape.value(x).shape().len() != 2 {
            return Err(Error::ShapeMismatch { left: tape.value(x).shape().to_vec(), right: vec![0, self.in_dim] });
        }
        let xin = match &self.act_q {
            Some(cfg) => fake_quant(tape, x, cfg, ScaleSource::Dynamic(Granularity::PerRow), trace)?,
            None => x,
        };
        let w = vars[self.weight.0];
        let wq = match (&self.weight_q, self.weight_frozen) {
            (Some((cfg, scale)), false) => fake_quant(tape, w, cfg, ScaleSource::Learned(vars[scale.0]), trace)?,
            _ => w,
        };
        let wt = tape.transpose(wq)?;
        let y = tape.matmul(xin, wt)?;
        match self.bias {
            Some(b) => tape.add_row(y, vars[b.0]),
            None => Ok(y),
        }
    }

    /// Integer weight codes and their scale, if the weight is quantized.
    pub fn export_codes(&self, params: &ParamSet<F>) -> Result<Option<(Vec<i8>, F)>> {
        match &self.weight_q {
            Some((cfg, scale)) => {
                let s = params.get(*scale).value.item();
                export_int_grid(&params.get(self.weight).value, cfg, s).map(Some)
            }
            None => Ok(None),
        }
    }

    /// Replaces the master weight by `codes * s` and bypasses the weight
    /// quantizer, so inference reproduces the fake-quantized forward.
    pub fn import_codes(&mut self, params: &mut ParamSet<F>, codes: &[i8], s: F) -> Result<()> {
        let Some((_, scale)) = self.weight_q else {
            return Err(Error::Config(format!("layer {} has no weight quantizer", self.name)));
        };
        let shape = params.get(self.weight).value.shape().to_vec();
        params.get_mut(self.weight).value = dequantize(codes, s, shape)?;
        params.get_mut(scale).value = Tensor::scalar(s);
        self.weight_frozen = true;
        Ok(())
    }
}
