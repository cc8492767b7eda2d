use super::{KvCache, ParamId, ParamRole, ParamSet, QuantLayout, QuantLinear, TinyAttention};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::quantizer::{QuantTrace, SCALE_FLOOR};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub context: usize,
    pub ffn_hidden: usize,
}

impl ModelConfig {
    /// `d = 64`, context 64, feed-forward width `4d`.
    pub fn with_vocab(vocab: usize) -> Self {
        Self { vocab, dim: 64, context: 64, ffn_hidden: 256 }
    }
}

/// Next-token prediction batch: `batch` windows of `seq` tokens, stacked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Splits each window `w[0..=seq]` into inputs `w[..seq]` and targets `w[1..]`.
    pub fn from_windows(windows: &[Vec<usize>]) -> Result<Self> {
        let seq = windows.first().map(|w| w.len().saturating_sub(1)).ok_or(Error::EmptyTensor)?;
        if seq == 0 {
            return Err(Error::EmptyTensor);
        }
        let mut inputs = Vec::with_capacity(windows.len() * seq);
        let mut targets = Vec::with_capacity(windows.len() * seq);
        for w in windows {
            if w.len() != seq + 1 {
                return Err(Error::ShapeMismatch { left: vec![w.len()], right: vec![seq + 1] });
            }
            inputs.extend_from_slice(&w[..seq]);
            targets.extend_from_slice(&w[1..]);
        }
        Ok(Self { inputs, targets, batch: windows.len(), seq })
    }
}

/// Integer weight codes of one quantized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedCodes<F> {
    pub name: String,
    pub bits: u32,
    pub scale: F,
    pub shape: Vec<usize>,
    pub codes: Vec<i8>,
}

/// Token + position embeddings, one attention block and one SiLU
/// feed-forward block (both residual), and an untied output head.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm<F> {
    pub config: ModelConfig,
    pub layout: QuantLayout<F>,
    params: ParamSet<F>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    pub attn: TinyAttention<F>,
    pub ff_up: QuantLinear<F>,
    pub ff_down: QuantLinear<F>,
    pub head: QuantLinear<F>,
}

/// Incremental decoding position and KV cache.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeState<F> {
    pub cache: KvCache<F>,
    pub pos: usize,
}

impl<F: Scalar> TinyLm<F> {
    /// `init` yields samples uniform in `[-1, 1)`; it is consumed in
    /// parameter order, so equal streams give bit-identical models.
    pub fn new(config: ModelConfig, layout: QuantLayout<F>, init: &mut dyn FnMut() -> f64) -> Result<Self> {
        let ModelConfig { vocab, dim, context, ffn_hidden } = config;
        if vocab == 0 || dim == 0 || context == 0 || ffn_hidden == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {config:?}")));
        }
        let mut params = ParamSet::default();
        let emb =
            |n: usize, init: &mut dyn FnMut() -> f64| -> Vec<F> { (0..n).map(|_| F::lit(0.1 * init())).collect() };
        let tok_emb = params.push("tok_emb", Tensor::matrix(vocab, dim, emb(vocab * dim, init))?, ParamRole::Weight);
        let pos_emb =
            params.push("pos_emb", Tensor::matrix(context, dim, emb(context * dim, init))?, ParamRole::Weight);
        let (wq, aq) = (layout.weights, layout.activations);
        let attn = TinyAttention::new(&mut params, "attn", dim, wq, aq, layout.kv, init)?;
        let ff_up = QuantLinear::new(&mut params, "ff_up", dim, ffn_hidden, true, wq, aq, init)?;
        let ff_down = QuantLinear::new(&mut params, "ff_down", ffn_hidden, dim, true, wq, aq, init)?;
        let head = QuantLinear::new(&mut params, "head", dim, vocab, false, wq, aq, init)?;
        Ok(Self { config, layout, params, tok_emb, pos_emb, attn, ff_up, ff_down, head })
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn linears(&self) -> [&QuantLinear<F>; 7] {
        [&self.attn.wq, &self.attn.wk, &self.attn.wv, &self.attn.wo, &self.ff_up, &self.ff_down, &self.head]
    }

    fn linears_mut(&mut self) -> [&mut QuantLinear<F>; 7] {
        let a = &mut self.attn;
        [&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo, &mut self.ff_up, &mut self.ff_down, &mut self.head]
    }

    /// Names and current values of the learned quantizer scales.
    pub fn scales(&self) -> Vec<(String, F)> {
        self.linears()
            .iter()
            .filter_map(|l| l.weight_q.map(|(_, id)| (l.name.clone(), self.params.get(id).value.item())))
            .collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab) {
            Some(&t) => Err(Error::IndexOutOfRange { index: t, classes: self.config.vocab }),
            None => Ok(()),
        }
    }

    fn block(&self, tape: &mut Tape<F>, vars: &[Var], x: Var, attn_out: Var, trace: &mut QuantTrace<F>) -> Result<Var> {
        let h = tape.add(x, attn_out)?;
        let u = self.ff_up.forward(tape, vars, h, trace)?;
        let u = tape.silu(u);
        let d = self.ff_down.forward(tape, vars, u, trace)?;
        let f = tape.add(h, d)?;
        self.head.forward(tape, vars, f, trace)
    }

    /// Logits `[batch * seq x vocab]` for stacked token windows.
    pub fn forward_logits(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        tokens: &[usize],
        batch: usize,
        seq: usize,
        trace: &mut QuantTrace<F>,
    ) -> Result<Var> {
        if seq > self.config.context {
            return Err(Error::ContextOverflow { len: seq, context: self.config.context });
        }
        if tokens.len() != batch * seq || tokens.is_empty() {
            return Err(Error::ShapeMismatch { left: vec![tokens.len()], right: vec![batch, seq] });
        }
        self.check_tokens(tokens)?;
        let x = tape.embedding(vars[self.tok_emb.0], tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).map(|i| i % seq).collect();
        let pe = tape.embedding(vars[self.pos_emb.0], &positions)?;
        let x = tape.add(x, pe)?;
        let a = self.attn.forward(tape, vars, x, batch, seq, trace)?.output;
        self.block(tape, vars, x, a, trace)
    }

    /// Records the mean next-token cross entropy on `tape`.
    pub fn lm_loss(&self, tape: &mut Tape<F>, vars: &[Var], batch: &Batch, trace: &mut QuantTrace<F>) -> Result<Var> {
        self.check_tokens(&batch.targets)?;
        let logits = self.forward_logits(tape, vars, &batch.inputs, batch.batch, batch.seq, trace)?;
        tape.softmax_cross_entropy(logits, &batch.targets)
    }

    pub fn loss(&self, batch: &Batch, trace: &mut QuantTrace<F>) -> Result<F> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let l = self.lm_loss(&mut tape, &vars, batch, trace)?;
        Ok(tape.value(l).item())
    }

    /// Loss and one gradient tensor per parameter, in [`ParamSet`] order.
    pub fn loss_and_grads(&self, batch: &Batch, trace: &mut QuantTrace<F>) -> Result<(F, Vec<Tensor<F>>)> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, true);
        let l = self.lm_loss(&mut tape, &vars, batch, trace)?;
        tape.backward(l)?;
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec())))
            .collect();
        Ok((tape.value(l).item(), grads))
    }

    /// Logits of every position of a single sequence.
    pub fn full_logits(&self, tokens: &[usize]) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let l = self.forward_logits(&mut tape, &vars, tokens, 1, tokens.len(), &mut QuantTrace::off())?;
        Ok(tape.value(l).clone())
    }

    /// Logits for the next position after feeding `token`.
    pub fn decode_step(&self, state: &mut DecodeState<F>, token: usize) -> Result<Vec<F>> {
        if state.pos >= self.config.context {
            return Err(Error::ContextOverflow { len: state.pos + 1, context: self.config.context });
        }
        self.check_tokens(&[token])?;
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let trace = &mut QuantTrace::off();
        let x = tape.embedding(vars[self.tok_emb.0], &[token])?;
        let pe = tape.embedding(vars[self.pos_emb.0], &[state.pos])?;
        let x = tape.add(x, pe)?;
        let a = self.attn.decode(&mut tape, &vars, x, &mut state.cache, trace)?;
        let logits = self.block(&mut tape, &vars, x, a, trace)?;
        state.pos += 1;
        Ok(tape.value(logits).data().to_vec())
    }

    pub fn export_codes(&self) -> Result<Vec<ExportedCodes<F>>> {
        let mut out = Vec::new();
        for l in self.linears() {
            if let (Some((cfg, _)), Some((codes, scale))) = (l.weight_q, l.export_codes(&self.params)?) {
                let shape = self.params.get(l.weight).value.shape().to_vec();
                out.push(ExportedCodes { name: l.name.clone(), bits: cfg.bits(), scale, shape, codes });
            }
        }
        Ok(out)
    }

    /// Loads integer weights produced by [`export_codes`](Self::export_codes).
    pub fn import_codes(&mut self, dump: &[ExportedCodes<F>]) -> Result<()> {
        for entry in dump {
            let mut params = std::mem::take(&mut self.params);
            let result = match self.linears_mut().into_iter().find(|l| l.name == entry.name) {
                Some(layer) => {
                    let shape = params.get(layer.weight).value.shape().to_vec();
                    if shape != entry.shape {
                        Err(Error::ShapeMismatch { left: shape, right: entry.shape.clone() })
                    } else {
                        layer.import_codes(&mut params, &entry.codes, entry.scale)
                    }
                }
                None => Err(Error::Config(format!("no quantized layer named {}", entry.name))),
            };
            self.params = params;
            result?;
        }
        Ok(())
    }

    /// Layers whose weights were replaced by imported codes.
    pub fn frozen_layers(&self) -> Vec<String> {
        self.linears().iter().filter(|l| l.weight_frozen).map(|l| l.name.clone()).collect()
    }

    pub fn set_frozen(&mut self, names: &[String]) {
        for l in self.linears_mut() {
            l.weight_frozen = names.contains(&l.name);
        }
    }
}

/// Adam over all parameters; learned scales use their own learning rate and
/// are projected back above [`SCALE_FLOOR`] after each step.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOptimizer<F> {
    pub adam: AdamConfig<F>,
    pub scale_lr: F,
    states: Vec<AdamState<F>>,
}

impl<F: Scalar> ModelOptimizer<F> {
    pub fn new(model: &TinyLm<F>, adam: AdamConfig<F>, scale_lr: F) -> Self {
        let states = model.params().iter().map(|p| AdamState::zeros(p.value.len())).collect();
        Self { adam, scale_lr, states }
    }

    pub fn step(&mut self, model: &mut TinyLm<F>, grads: &[Tensor<F>]) -> Result<()> {
        if grads.len() != self.states.len() {
            return Err(Error::ShapeMismatch { left: vec![grads.len()], right: vec![self.states.len()] });
        }
        for ((p, g), st) in model.params_mut().iter_mut().zip(grads).zip(&mut self.states) {
            let cfg = match p.role {
                ParamRole::Weight => self.adam,
                ParamRole::Scale => AdamConfig { lr: self.scale_lr, ..self.adam },
            };
            adam_step(p.value.data_mut(), g.data(), st, &cfg)?;
            if p.role == ParamRole::Scale {
                for s in p.value.data_mut() {
                    *s = s.max(F::lit(SCALE_FLOOR));
                }
            }
        }
        Ok(())
    }
}
