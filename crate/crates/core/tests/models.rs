use qat_core::autodiff::{AdamConfig, Tape, Tensor};
use qat_core::gradcheck::{check_model_gradients, Comparison, Tolerance};
use qat_core::models::{
    perplexity, Batch, DecodeState, ModelConfig, ModelOptimizer, ParamRole, ParamSet, QuantLayout, QuantLinear,
    TinyAttention, TinyLm,
};
use qat_core::quantizer::{QuantConfig, QuantTrace, ScaleMode};
use qat_core::rounding::RoundingEstimator;
use qat_core::softclamp::{ClampMode, GateFunction};
use qat_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIG: GateFunction<f64> = GateFunction::Logistic { beta: 1.0 };

fn uniform(seed: u64) -> impl FnMut() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move || rng.gen_range(-1.0..1.0)
}

fn mini_config() -> ModelConfig {
    ModelConfig { vocab: 6, dim: 8, context: 4, ffn_hidden: 8 }
}

fn random_batch(rng: &mut ChaCha8Rng, vocab: usize, batch: usize, seq: usize) -> Batch {
    let windows: Vec<Vec<usize>> = (0..batch).map(|_| (0..=seq).map(|_| rng.gen_range(0..vocab)).collect()).collect();
    Batch::from_windows(&windows).unwrap()
}

fn layout(t: f64, soft: bool) -> QuantLayout<f64> {
    let clamp = if soft { ClampMode::Soft(SIG) } else { ClampMode::Hard };
    QuantLayout::w4a8kv4(RoundingEstimator::from_temperature(t).unwrap(), clamp).unwrap()
}

#[test]
fn zero_weights_give_bias() {
    let mut params = ParamSet::default();
    let wq = QuantConfig::new(4, ScaleMode::LearnableStatic, RoundingEstimator::PassThrough, ClampMode::Hard).unwrap();
    let aq = QuantConfig::new(8, ScaleMode::MinMaxDynamic, RoundingEstimator::PassThrough, ClampMode::Hard).unwrap();
    let layer = QuantLinear::new(&mut params, "l", 3, 2, true, Some(wq), Some(aq), &mut || 0.0).unwrap();
    params.get_mut(layer.bias.unwrap()).value = Tensor::from_vec(vec![1.0, -2.0]);
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let x = tape.leaf(Tensor::matrix(2, 3, vec![0.3, -4.0, 2.0, 1.0, 1.0, 1.0]).unwrap(), false);
    let y = layer.forward(&mut tape, &vars, x, &mut QuantTrace::off()).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, -2.0, 1.0, -2.0]);

    let bad = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), false);
    assert!(matches!(layer.forward(&mut tape, &vars, bad, &mut QuantTrace::off()), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn two_by_two_layer_matches_hand_composition() {
    let mut params = ParamSet::default();
    let wq = QuantConfig::new(4, ScaleMode::LearnableStatic, RoundingEstimator::PassThrough, ClampMode::Hard).unwrap();
    let aq = QuantConfig::new(8, ScaleMode::MinMaxDynamic, RoundingEstimator::PassThrough, ClampMode::Hard).unwrap();
    let mut vals = vec![0.7, -0.35, 0.1, 0.5].into_iter();
    let layer =
        QuantLinear::new(&mut params, "l", 2, 2, false, Some(wq), Some(aq), &mut || vals.next().unwrap()).unwrap();
    // weights are init * 1/sqrt(2)
    let r = 1.0 / 2f64.sqrt();
    let w = [0.7 * r, -0.35 * r, 0.1 * r, 0.5 * r];
    let s_w = (0.7 * r) / 7.0;
    let q_w: Vec<f64> = w.iter().map(|v| s_w * (v / s_w).round().clamp(-7.0, 7.0)).collect();
    let x = [1.27_f64, -0.4];
    let s_x = 1.27 / 127.0;
    let q_x: Vec<f64> = x.iter().map(|v| s_x * (v / s_x).round().clamp(-127.0, 127.0)).collect();
    let expected = [q_x[0] * q_w[0] + q_x[1] * q_w[1], q_x[0] * q_w[2] + q_x[1] * q_w[3]];

    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let xv = tape.leaf(Tensor::matrix(1, 2, x.to_vec()).unwrap(), false);
    let y = layer.forward(&mut tape, &vars, xv, &mut QuantTrace::off()).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn eight_bit_layer_tracks_full_precision() {
    let mut init = uniform(3);
    let wq = QuantConfig::new(8, ScaleMode::LearnableStatic, RoundingEstimator::PassThrough, ClampMode::Hard).unwrap();
    let aq = QuantConfig::new(8, ScaleMode::MinMaxDynamic, RoundingEstimator::PassThrough, ClampMode::Hard).unwrap();
    let mut params = ParamSet::default();
    let q = QuantLinear::new(&mut params, "q", 16, 4, false, Some(wq), Some(aq), &mut init).unwrap();
    let mut plain = q.clone();
    plain.weight_q = None;
    plain.act_q = None;
    let xs: Vec<f64> = (0..32).map(|_| 0.05 * init()).collect();
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.leaf(Tensor::matrix(2, 16, xs.clone()).unwrap(), false);
    let yq = q.forward(&mut tape, &vars, x, &mut QuantTrace::off()).unwrap();
    let yf = plain.forward(&mut tape, &vars, x, &mut QuantTrace::off()).unwrap();
    let w = &params.get(q.weight).value;
    let s_w = params.get(q.weight_q.unwrap().1).value.item();
    for r in 0..2 {
        let row = &xs[r * 16..(r + 1) * 16];
        let s_x = row.iter().fold(0.0f64, |m, v| m.max(v.abs())) / 127.0;
        for o in 0..4 {
            // |x_q w_q - x w| <= |x| s_w / 2 + |w| s_x / 2 + s_x s_w / 4
            let bound: f64 =
                (0..16).map(|k| row[k].abs() * s_w / 2.0 + w.row(o)[k].abs() * s_x / 2.0 + s_x * s_w / 4.0).sum();
            let diff = (tape.value(yq).data()[r * 4 + o] - tape.value(yf).data()[r * 4 + o]).abs();
            assert!(diff <= bound * (1.0 + 1e-12), "diff {diff} > bound {bound}");
            assert!(diff <= 2.0 * s_w.max(s_x));
        }
    }
}

fn attention(kv: Option<QuantConfig<f64>>, seed: u64) -> (ParamSet<f64>, TinyAttention<f64>) {
    let mut params = ParamSet::default();
    let attn = TinyAttention::new(&mut params, "attn", 8, None, None, kv, &mut uniform(seed)).unwrap();
    (params, attn)
}

#[test]
fn single_token_attention_is_output_projection_of_value() {
    let (params, attn) = attention(None, 11);
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.leaf(Tensor::matrix(1, 8, (0..8).map(|i| 0.1 * i as f64 - 0.3).collect()).unwrap(), false);
    let out = attn.forward(&mut tape, &vars, x, 1, 1, &mut QuantTrace::off()).unwrap();
    let v = attn.wv.forward(&mut tape, &vars, x, &mut QuantTrace::off()).unwrap();
    let expected = attn.wo.forward(&mut tape, &vars, v, &mut QuantTrace::off()).unwrap();
    assert_eq!(tape.value(out.output), tape.value(expected));
}

#[test]
fn attention_rows_are_stochastic() {
    let (params, attn) = attention(None, 12);
    let mut init = uniform(99);
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.leaf(Tensor::matrix(6, 8, (0..48).map(|_| init()).collect()).unwrap(), false);
    let out = attn.forward(&mut tape, &vars, x, 2, 3, &mut QuantTrace::off()).unwrap();
    assert_eq!(out.probs.len(), 2);
    for p in out.probs {
        let t = tape.value(p);
        for r in 0..3 {
            assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(t.row(r)[r + 1..].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn eight_bit_kv_quantization_barely_moves_outputs() {
    let kv = QuantConfig::new(8, ScaleMode::MinMaxDynamic, RoundingEstimator::PassThrough, ClampMode::Hard).unwrap();
    let (params, quantized) = attention(Some(kv), 5);
    let mut plain = quantized.clone();
    plain.kv_q = None;
    let mut init = uniform(6);
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.leaf(Tensor::matrix(8, 8, (0..64).map(|_| 0.1 * init()).collect()).unwrap(), false);
    let a = quantized.forward(&mut tape, &vars, x, 1, 8, &mut QuantTrace::off()).unwrap().output;
    let b = plain.forward(&mut tape, &vars, x, 1, 8, &mut QuantTrace::off()).unwrap().output;
    let max = tape.value(a).data().iter().zip(tape.value(b).data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(max > 0.0 && max < 1e-2, "{max}");
}

#[test]
fn default_model_is_small_and_finite() {
    for vocab in [57, 256] {
        let model = TinyLm::new(ModelConfig::with_vocab(vocab), layout(100.0, true), &mut uniform(1)).unwrap();
        assert!(model.num_parameters() <= 200_000, "{}", model.num_parameters());
    }
    let model = TinyLm::new(ModelConfig::with_vocab(57), layout(0.0, false), &mut uniform(1)).unwrap();
    assert_eq!(model.scales().len(), 7);
    assert!(model.scales().iter().all(|(_, s)| *s > 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = random_batch(&mut rng, 57, 2, 64);
    let (loss, grads) = model.loss_and_grads(&b, &mut QuantTrace::off()).unwrap();
    assert!(loss.is_finite());
    assert!(grads.iter().all(Tensor::all_finite));
}

#[test]
fn rejects_bad_inputs() {
    let model = TinyLm::new(mini_config(), layout(0.0, false), &mut uniform(1)).unwrap();
    let long = Batch::from_windows(&[vec![0; 6]]).unwrap();
    assert_eq!(model.loss(&long, &mut QuantTrace::off()), Err(Error::ContextOverflow { len: 5, context: 4 }));
    let oov = Batch::from_windows(&[vec![0, 1, 9]]).unwrap();
    assert_eq!(model.loss(&oov, &mut QuantTrace::off()), Err(Error::IndexOutOfRange { index: 9, classes: 6 }));
}

#[test]
fn fresh_model_perplexity_is_close_to_vocab() {
    let vocab = 57;
    let model = TinyLm::new(ModelConfig::with_vocab(vocab), layout(0.0, false), &mut uniform(21)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut total = 0.0;
    let n = 5;
    for _ in 0..n {
        // 5 x 32 x 64 = 10240 tokens
        total += model.loss(&random_batch(&mut rng, vocab, 32, 64), &mut QuantTrace::off()).unwrap();
    }
    let ppl = perplexity(total / n as f64);
    assert!((ppl - vocab as f64).abs() <= 0.2 * vocab as f64, "ppl {ppl}");
    assert_eq!(perplexity(0.0), 1.0);
}

#[test]
fn memorises_a_repeated_token() {
    let mut model =
        TinyLm::new(ModelConfig { vocab: 8, dim: 16, context: 8, ffn_hidden: 32 }, layout(10.0, true), &mut uniform(4))
            .unwrap();
    let batch = Batch::from_windows(&[vec![3; 9], vec![3; 9]]).unwrap();
    let mut opt = ModelOptimizer::new(&model, AdamConfig { lr: 1e-2, ..AdamConfig::default() }, 1e-3);
    for _ in 0..200 {
        let (_, grads) = model.loss_and_grads(&batch, &mut QuantTrace::off()).unwrap();
        opt.step(&mut model, &grads).unwrap();
    }
    let ppl = perplexity(model.loss(&batch, &mut QuantTrace::off()).unwrap());
    assert!(ppl < 1.05, "ppl {ppl}");
    assert!(model.scales().iter().all(|(_, s)| *s > 0.0));
}

#[test]
fn full_precision_training_decreases_loss_monotonically() {
    let mut model = TinyLm::new(ModelConfig::with_vocab(30), QuantLayout::full_precision(), &mut uniform(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = random_batch(&mut rng, 30, 4, 32);
    let mut opt = ModelOptimizer::new(&model, AdamConfig::default(), 1e-4);
    let mut prev = f64::INFINITY;
    for step in 0..50 {
        let (loss, grads) = model.loss_and_grads(&batch, &mut QuantTrace::off()).unwrap();
        assert!(loss < prev, "step {step}: {loss} >= {prev}");
        prev = loss;
        opt.step(&mut model, &grads).unwrap();
    }
}

/// Finite differences on `samples` random weight entries plus every learned
/// scale. Quantized models are differentiated through the replayed
/// straight-through surrogate.
fn network_gradcheck(model: &TinyLm<f64>, batch: &Batch, seed: u64, samples: usize, tol: Tolerance) -> Comparison {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<_> = model.params().iter().cloned().collect();
    let mut targets: Vec<(usize, usize)> =
        (0..params.len()).filter(|&i| params[i].role == ParamRole::Scale).map(|i| (i, 0)).collect();
    let weights: Vec<usize> = (0..params.len()).filter(|&i| params[i].role == ParamRole::Weight).collect();
    for _ in 0..samples {
        let p = weights[rng.gen_range(0..weights.len())];
        targets.push((p, rng.gen_range(0..params[p].value.len())));
    }
    check_model_gradients(model, batch, &targets, 1e-6, tol).unwrap()
}

#[test]
fn full_precision_network_gradients_match_differences() {
    let model = TinyLm::new(mini_config(), QuantLayout::full_precision(), &mut uniform(31)).unwrap();
    assert!((450..=550).contains(&model.num_parameters()), "{}", model.num_parameters());
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let batch = random_batch(&mut rng, 6, 2, 4);
    let cmp = network_gradcheck(&model, &batch, 33, 20, Tolerance::NETWORK);
    assert!(cmp.passed() && cmp.points >= 20, "{cmp:?}");
}

#[test]
fn quantized_network_gradients_match_replayed_surrogate() {
    for (t, soft) in [(0.0, false), (0.0, true), (10.0, true), (100.0, false)] {
        let mut model = TinyLm::new(mini_config(), layout(t, soft), &mut uniform(41)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let batch = random_batch(&mut rng, 6, 2, 4);
        // move the learned scales off their MinMax init
        let mut opt = ModelOptimizer::new(&model, AdamConfig::default(), 1e-3);
        for _ in 0..3 {
            let (_, g) = model.loss_and_grads(&batch, &mut QuantTrace::off()).unwrap();
            opt.step(&mut model, &g).unwrap();
        }
        let cmp = network_gradcheck(&model, &batch, 43, 20, Tolerance::PIECEWISE);
        assert!(cmp.passed() && cmp.points >= 27, "T={t} soft={soft}: {cmp:?}");
    }
}

#[test]
fn cached_decoding_matches_full_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for (t, soft) in [(0.0, false), (100.0, true)] {
        let model = TinyLm::new(ModelConfig::with_vocab(20), layout(t, soft), &mut uniform(52)).unwrap();
        let tokens: Vec<usize> = (0..40).map(|_| rng.gen_range(0..20)).collect();
        let full = model.full_logits(&tokens).unwrap();
        let mut state = DecodeState::default();
        for (pos, &tok) in tokens.iter().enumerate() {
            let row = model.decode_step(&mut state, tok).unwrap();
            for (a, b) in row.iter().zip(full.row(pos)) {
                assert!((a - b).abs() <= 1e-9, "pos {pos}: {a} vs {b}");
            }
        }
        assert_eq!(state.cache.len(), 40);
    }
}

#[test]
fn decoding_stops_at_context() {
    let model = TinyLm::new(mini_config(), layout(0.0, false), &mut uniform(1)).unwrap();
    let mut state = DecodeState::default();
    for _ in 0..4 {
        model.decode_step(&mut state, 1).unwrap();
    }
    assert!(matches!(model.decode_step(&mut state, 1), Err(Error::ContextOverflow { .. })));
}

#[test]
fn identical_seeds_give_identical_gradients() {
    let run = || {
        let model = TinyLm::new(ModelConfig::with_vocab(16), layout(10.0, true), &mut uniform(61)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        model.loss_and_grads(&random_batch(&mut rng, 16, 2, 16), &mut QuantTrace::off()).unwrap()
    };
    let (la, ga) = run();
    let (lb, gb) = run();
    assert_eq!(la.to_bits(), lb.to_bits());
    for (a, b) in ga.iter().zip(&gb) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn imported_codes_reproduce_the_quantized_forward() {
    let mut model = TinyLm::new(ModelConfig::with_vocab(20), layout(10.0, true), &mut uniform(71)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let mut opt = ModelOptimizer::new(&model, AdamConfig::default(), 1e-4);
    for _ in 0..3 {
        let (_, g) = model.loss_and_grads(&random_batch(&mut rng, 20, 2, 16), &mut QuantTrace::off()).unwrap();
        opt.step(&mut model, &g).unwrap();
    }
    let tokens: Vec<usize> = (0..30).map(|_| rng.gen_range(0..20)).collect();
    let reference = model.full_logits(&tokens).unwrap();
    let dump = model.export_codes().unwrap();
    assert_eq!(dump.len(), 7);
    assert!(dump.iter().all(|d| d.bits == 4 && d.codes.iter().all(|c| (-7..=7).contains(c))));
    let mut restored = model.clone();
    restored.import_codes(&dump).unwrap();
    assert_eq!(restored.frozen_layers().len(), 7);
    let again = restored.full_logits(&tokens).unwrap();
    assert!(reference.data().iter().zip(again.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn single_precision_model_runs() {
    let clamp = ClampMode::Soft(GateFunction::Logistic { beta: 1.0f32 });
    let lay = QuantLayout::w4a8kv4(RoundingEstimator::sigmoid(10.0f32).unwrap(), clamp).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model: TinyLm<f32> = TinyLm::new(ModelConfig::with_vocab(12), lay, &mut uniform(5)).unwrap();
    let (loss, grads) = model.loss_and_grads(&random_batch(&mut rng, 12, 2, 8), &mut QuantTrace::off()).unwrap();
    assert!(loss.is_finite() && grads.iter().all(Tensor::all_finite));
}
