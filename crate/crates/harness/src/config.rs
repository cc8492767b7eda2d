//! Experiment configuration.
//!
//! Configs are JSON objects. Every key is optional and falls back to
//! [`ExperimentConfig::default`]; unknown keys are rejected. A complete
//! example:
//!
//! ```json
//! {
//!   "seed": 0,
//!   "corpus": null,
//!   "model": { "dim": 64, "context": 64, "ffn_hidden": 256 },
//!   "optimizer": { "lr": 0.0003, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "scale_lr": 0.0001 },
//!   "steps": 200,
//!   "batch": 4,
//!   "seq_len": 64,
//!   "eval_batches": 8,
//!   "estimator": { "variant": "sigmoid", "temperature": 100.0 },
//!   "clamp": { "mode": "soft", "gate": "logistic", "beta": 1.0 },
//!   "bits": { "weights": 4, "activations": 8, "kv": 4 }
//! }
//! ```
//!
//! `corpus: null` selects the bundled text. A `null` bit width leaves that
//! tensor class unquantized.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use qat_core::autodiff::AdamConfig;
use qat_core::models::{ModelConfig, QuantLayout};
use qat_core::quantizer::{QuantConfig, ScaleMode};
use qat_core::rounding::RoundingEstimator;
use qat_core::softclamp::{ClampMode, GateFunction};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    pub model: ModelDims,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch: usize,
    /// Training window length, at most `model.context`.
    pub seq_len: usize,
    /// Number of evaluation batches (of `batch` windows each).
    pub eval_batches: usize,
    pub estimator: EstimatorSpec,
    pub clamp: ClampSpec,
    pub bits: BitWidths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: None,
            model: ModelDims::default(),
            optimizer: OptimizerConfig::default(),
            steps: 200,
            batch: 4,
            seq_len: 64,
            eval_batches: 8,
            estimator: EstimatorSpec::default(),
            clamp: ClampSpec::default(),
            bits: BitWidths::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub dim: usize,
    pub context: usize,
    pub ffn_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        let m = ModelConfig::with_vocab(1);
        Self { dim: m.dim, context: m.context, ffn_hidden: m.ffn_hidden }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate of the learned quantizer scales.
    pub scale_lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, scale_lr: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorVariant {
    PassThrough,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSpec {
    pub variant: EstimatorVariant,
    /// Must be 0 for `pass_through` and positive for `sigmoid`.
    pub temperature: f64,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        Self { variant: EstimatorVariant::Sigmoid, temperature: 100.0 }
    }
}

impl EstimatorSpec {
    /// `T = 0` is pass-through.
    pub fn from_temperature(temperature: f64) -> Self {
        let variant = if temperature == 0.0 { EstimatorVariant::PassThrough } else { EstimatorVariant::Sigmoid };
        Self { variant, temperature }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampKind {
    Hard,
    Soft,
}

impl ClampKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Hard => "hard",
            Self::Soft => "soft",
        }
    }
}

impl std::str::FromStr for ClampKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            other => Err(format!("unknown clamp mode `{other}` (expected hard or soft)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Logistic,
    GaussianCdf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClampSpec {
    pub mode: ClampKind,
    pub gate: GateKind,
    /// Slope of the logistic gate; ignored by `gaussian_cdf`.
    pub beta: f64,
}

impl Default for ClampSpec {
    fn default() -> Self {
        Self { mode: ClampKind::Soft, gate: GateKind::Logistic, beta: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BitWidths {
    pub weights: Option<u32>,
    pub activations: Option<u32>,
    pub kv: Option<u32>,
}

impl Default for BitWidths {
    fn default() -> Self {
        Self { weights: Some(4), activations: Some(8), kv: Some(4) }
    }
}

/// A config value that failed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config field `{}`: {}", self.field, self.reason)
    }
}

impl std::error::Error for ConfigError {}

fn bad(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError { field, reason: reason.into() }
}

fn positive(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(bad(field, format!("must be positive and finite, got {v}")))
    }
}

fn unit_open(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(bad(field, format!("must lie in [0, 1), got {v}")))
    }
}

fn nonzero(field: &'static str, v: usize) -> Result<(), ConfigError> {
    if v == 0 {
        Err(bad(field, "must be at least 1"))
    } else {
        Ok(())
    }
}

fn bit_width(field: &'static str, v: Option<u32>) -> Result<(), ConfigError> {
    match v {
        Some(b) if !(2..=8).contains(&b) => Err(bad(field, format!("must be between 2 and 8 or null, got {b}"))),
        _ => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("cannot parse config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        nonzero("model.dim", self.model.dim)?;
        nonzero("model.context", self.model.context)?;
        nonzero("model.ffn_hidden", self.model.ffn_hidden)?;
        let o = &self.optimizer;
        positive("optimizer.lr", o.lr)?;
        unit_open("optimizer.beta1", o.beta1)?;
        unit_open("optimizer.beta2", o.beta2)?;
        positive("optimizer.eps", o.eps)?;
        positive("optimizer.scale_lr", o.scale_lr)?;
        nonzero("batch", self.batch)?;
        nonzero("seq_len", self.seq_len)?;
        if self.seq_len > self.model.context {
            return Err(bad("seq_len", format!("{} exceeds model.context {}", self.seq_len, self.model.context)));
        }
        nonzero("eval_batches", self.eval_batches)?;
        let t = self.estimator.temperature;
        match self.estimator.variant {
            EstimatorVariant::PassThrough if t != 0.0 => {
                return Err(bad("estimator.temperature", format!("must be 0 for pass_through, got {t}")))
            }
            EstimatorVariant::Sigmoid => positive("estimator.temperature", t)?,
            EstimatorVariant::PassThrough => {}
        }
        if self.clamp.gate == GateKind::Logistic {
            positive("clamp.beta", self.clamp.beta)?;
        }
        bit_width("bits.weights", self.bits.weights)?;
        bit_width("bits.activations", self.bits.activations)?;
        bit_width("bits.kv", self.bits.kv)?;
        Ok(())
    }

    pub fn estimator(&self) -> RoundingEstimator<f64> {
        match self.estimator.variant {
            EstimatorVariant::PassThrough => RoundingEstimator::PassThrough,
            EstimatorVariant::Sigmoid => RoundingEstimator::Sigmoid { temperature: self.estimator.temperature },
        }
    }

    pub fn clamp_mode(&self) -> ClampMode<f64> {
        match (self.clamp.mode, self.clamp.gate) {
            (ClampKind::Hard, _) => ClampMode::Hard,
            (ClampKind::Soft, GateKind::Logistic) => ClampMode::Soft(GateFunction::Logistic { beta: self.clamp.beta }),
            (ClampKind::Soft, GateKind::GaussianCdf) => ClampMode::Soft(GateFunction::GaussianCdf),
        }
    }

    /// Learned weight scales and per-token dynamic activation and KV scales,
    /// all sharing the configured estimator and clamp.
    pub fn layout(&self) -> qat_core::Result<QuantLayout<f64>> {
        let (est, clamp) = (self.estimator(), self.clamp_mode());
        let make = |bits: Option<u32>, mode| bits.map(|b| QuantConfig::new(b, mode, est, clamp)).transpose();
        Ok(QuantLayout {
            weights: make(self.bits.weights, ScaleMode::LearnableStatic)?,
            activations: make(self.bits.activations, ScaleMode::MinMaxDynamic)?,
            kv: make(self.bits.kv, ScaleMode::MinMaxDynamic)?,
        })
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig { vocab, dim: self.model.dim, context: self.model.context, ffn_hidden: self.model.ffn_hidden }
    }

    pub fn adam(&self) -> AdamConfig<f64> {
        let o = &self.optimizer;
        AdamConfig { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps }
    }
}
