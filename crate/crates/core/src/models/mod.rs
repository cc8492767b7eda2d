//! Desk-scale quantized network components.
//!
//! The default layout quantizes weights to 4 bits with learned per-tensor
//! scales, linear-layer input activations to 8 bits and attention keys and
//! values to 4 bits, the latter two with per-token MinMax scales. Per-token
//! dynamic scales make a full-sequence forward pass and incremental decoding
//! with a KV cache produce identical values.

mod attention;
mod linear;
mod lm;

pub use attention::{AttentionOutput, KvCache, TinyAttention};
pub use linear::QuantLinear;
pub use lm::{Batch, DecodeState, ExportedCodes, ModelConfig, ModelOptimizer, TinyLm};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::quantizer::{QuantConfig, ScaleMode};
use crate::rounding::RoundingEstimator;
use crate::scalar::Scalar;
use crate::softclamp::ClampMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    /// Learned quantizer step size; kept strictly positive.
    Scale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub role: ParamRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named parameter tensors of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<F>, role: ParamRole) -> ParamId {
        self.params.push(Param { name: name.into(), value, role });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a tape leaf, in order.
    pub fn register(&self, tape: &mut Tape<F>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect()
    }
}

/// Which tensors are fake-quantized, and how. `None` keeps full precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantLayout<F> {
    pub weights: Option<QuantConfig<F>>,
    pub activations: Option<QuantConfig<F>>,
    pub kv: Option<QuantConfig<F>>,
}

impl<F: Scalar> QuantLayout<F> {
    pub fn full_precision() -> Self {
        Self { weights: None, activations: None, kv: None }
    }

    /// Weights, activations and KV values at the given bit widths, all sharing
    /// one estimator and clamp mode.
    pub fn uniform(
        weight_bits: u32,
        activation_bits: u32,
        kv_bits: u32,
        estimator: RoundingEstimator<F>,
        clamp: ClampMode<F>,
    ) -> Result<Self> {
        Ok(Self {
            weights: Some(QuantConfig::new(weight_bits, ScaleMode::LearnableStatic, estimator, clamp)?),
            activations: Some(QuantConfig::new(activation_bits, ScaleMode::MinMaxDynamic, estimator, clamp)?),
            kv: Some(QuantConfig::new(kv_bits, ScaleMode::MinMaxDynamic, estimator, clamp)?),
        })
    }

    /// 4-bit weights, 8-bit activations, 4-bit KV values.
    pub fn w4a8kv4(estimator: RoundingEstimator<F>, clamp: ClampMode<F>) -> Result<Self> {
        Self::uniform(4, 8, 4, estimator, clamp)
    }
}

/// `exp(mean loss)`
pub fn perplexity<F: Scalar>(mean_loss: F) -> F {
    mean_loss.exp()
}
