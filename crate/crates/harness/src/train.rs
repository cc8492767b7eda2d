//! Toy QAT training runs.
//!
//! One ChaCha8 stream seeded from `config.seed` drives everything: parameter
//! initialisation first, then the training batch offsets. Equal configs give
//! bit-identical metrics.

use std::path::{Path, PathBuf};

use anyhow::Context;
use qat_core::models::{perplexity, Batch, ModelOptimizer, ParamRole, TinyLm};
use qat_core::quantizer::QuantTrace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::corpus::{sha256_hex, Corpus};
use crate::table::{float, Table};

/// Trajectory of one learned scale, its initial value included.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleSummary {
    pub name: String,
    pub min: f64,
    pub max: f64,
    #[serde(rename = "final")]
    pub last: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Mean loss over the training probe batches before the first step.
    pub initial_loss: f64,
    /// Same probe after the last step.
    pub final_train_loss: f64,
    pub eval_loss: f64,
    pub eval_ppl: f64,
    /// A non-finite loss or gradient stopped the run early.
    pub nan: bool,
    pub steps_run: usize,
    /// SHA-256 of the initial weights (scales excluded).
    pub init_checksum: String,
    pub scales: Vec<ScaleSummary>,
    /// `step, loss, grad_norm, s_<layer>...`, one row per completed step.
    pub metrics: Table,
    pub checkpoint: Checkpoint,
}

pub fn weight_checksum(model: &TinyLm<f64>) -> String {
    let mut bytes = Vec::new();
    for p in model.params().iter().filter(|p| p.role == ParamRole::Weight) {
        p.value.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    }
    sha256_hex(&bytes)
}

fn mean_loss(model: &TinyLm<f64>, batches: &[Batch]) -> anyhow::Result<f64> {
    let mut total = 0.0;
    for b in batches {
        total += model.loss(b, &mut QuantTrace::off())?;
    }
    Ok(total / batches.len() as f64)
}

pub fn train(cfg: &ExperimentConfig, corpus: &Corpus) -> anyhow::Result<TrainOutcome> {
    cfg.validate()?;
    let probe = corpus.train_probe_batches(cfg.eval_batches, cfg.batch, cfg.seq_len)?;
    let eval = corpus.eval_batches(cfg.eval_batches, cfg.batch, cfg.seq_len)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TinyLm::new(cfg.model_config(corpus.vocab()), cfg.layout()?, &mut || rng.gen_range(-1.0..1.0))?;
    let init_checksum = weight_checksum(&model);
    let mut opt = ModelOptimizer::new(&model, cfg.adam(), cfg.optimizer.scale_lr);

    let scale_names: Vec<String> = model.scales().into_iter().map(|(n, _)| n).collect();
    let mut header = vec!["step".to_string(), "loss".into(), "grad_norm".into()];
    header.extend(scale_names.iter().map(|n| format!("s_{n}")));
    let mut metrics = Table::new(header);
    let mut scales: Vec<ScaleSummary> =
        model.scales().into_iter().map(|(name, s)| ScaleSummary { name, min: s, max: s, last: s }).collect();

    let initial_loss = mean_loss(&model, &probe)?;
    let mut nan = !initial_loss.is_finite();
    let mut steps_run = 0;
    while !nan && steps_run < cfg.steps {
        let batch = corpus.sample_batch(&mut rng, cfg.batch, cfg.seq_len)?;
        let (loss, grads) = model.loss_and_grads(&batch, &mut QuantTrace::off())?;
        let grad_norm = grads.iter().flat_map(|g| g.data()).map(|g| g * g).sum::<f64>().sqrt();
        if !(loss.is_finite() && grad_norm.is_finite()) {
            nan = true;
            break;
        }
        opt.step(&mut model, &grads)?;
        steps_run += 1;
        let mut row = vec![steps_run.to_string(), float(loss), float(grad_norm)];
        for (summary, (_, s)) in scales.iter_mut().zip(model.scales()) {
            summary.min = summary.min.min(s);
            summary.max = summary.max.max(s);
            summary.last = s;
            row.push(float(s));
        }
        metrics.push(row);
    }

    let final_train_loss = mean_loss(&model, &probe)?;
    let eval_loss = mean_loss(&model, &eval)?;
    nan |= !(final_train_loss.is_finite() && eval_loss.is_finite());
    Ok(TrainOutcome {
        initial_loss,
        final_train_loss,
        eval_loss,
        eval_ppl: perplexity(eval_loss),
        nan,
        steps_run,
        init_checksum,
        scales,
        metrics,
        checkpoint: Checkpoint { config: cfg.clone(), alphabet: corpus.alphabet().to_vec(), steps: steps_run, model },
    })
}

#[derive(Serialize)]
struct Summary<'a> {
    steps_run: usize,
    nan: bool,
    initial_loss: f64,
    final_train_loss: f64,
    eval_loss: f64,
    eval_ppl: f64,
    init_checksum: &'a str,
    scales: &'a [ScaleSummary],
}

/// Trains and writes `metrics.csv`, `checkpoint.bin` and `summary.json` into `dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, corpus: &Corpus, dir: &Path) -> anyhow::Result<TrainOutcome> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let out = train(cfg, corpus)?;
    out.metrics.write(&dir.join("metrics.csv"))?;
    out.checkpoint.save(&dir.join("checkpoint.bin"))?;
    let summary = Summary {
        steps_run: out.steps_run,
        nan: out.nan,
        initial_loss: out.initial_loss,
        final_train_loss: out.final_train_loss,
        eval_loss: out.eval_loss,
        eval_ppl: out.eval_ppl,
        init_checksum: &out.init_checksum,
        scales: &out.scales,
    };
    let path = dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(out)
}

pub fn cmd_train(config: &Path, dir: &Path) -> anyhow::Result<(TrainOutcome, PathBuf)> {
    let cfg = ExperimentConfig::load(config)?;
    let corpus = Corpus::load(cfg.corpus.as_deref())?;
    let out = run_to_dir(&cfg, &corpus, dir)?;
    Ok((out, dir.join("checkpoint.bin")))
}
