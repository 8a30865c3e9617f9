//! Oracle checks shared by the acceptance suite and the focused test targets.
//! Each returns `Ok(detail)` on success and `Err(reason)` on the first failure.
#![allow(dead_code)]

use std::collections::HashMap;
use std::fmt::Display;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsnmt::analysis::{
    attention_entropy, bleu, export_attention, AttentionDocument, AttentionStats, AttentionTrace,
    HeadAttention, LayerAttention,
};
use rsnmt::data::{Batch, BatchPair, EncodedCorpus, ParallelCorpus, Vocabulary, BOS, EOS};
use rsnmt::decoding::{
    beam_decode, beam_search, greedy_decode, length_penalty, translate, DecodeConfig, Hypothesis,
};
use rsnmt::model::{
    build_model, count_parameters, decode_forward, encode, ModelConfig, ModelWeights, StackingMode,
};
use rsnmt::tensor::{Float, Tape, Tensor, Var};
use rsnmt::toy::{generate, ToySpec, ToyTask};
use rsnmt::training::{
    average_checkpoints, compute_gradients, train, Checkpoint, CheckpointSink, Provenance,
    TrainConfig,
};
use rsnmt::transfer::{distill_corpus, init_from_teacher, DistillConfig, TransferConfig};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)*));
        }
    };
}

pub fn err(e: impl Display) -> String {
    e.to_string()
}

pub fn within(limit: Duration, start: Instant, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure!(took <= limit, "{what} took {took:.1?}, limit {limit:?}");
    Ok(())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config(stacking: StackingMode, vocab: usize, tie: bool) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_ff: 24,
        n_heads: 4,
        stacking,
        src_vocab_size: vocab,
        tgt_vocab_size: vocab,
        share_src_tgt_embedding: tie,
        tie_output_projection: tie,
        dropout: 0.0,
        max_positions: 40,
    }
}

/// Random token sequences over the non-reserved ids, each ending in `</s>`.
pub fn random_sequences(
    r: &mut ChaCha8Rng,
    n: usize,
    vocab: usize,
    max_len: usize,
) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let len = r.random_range(1..=max_len);
            let mut s: Vec<usize> = (0..len).map(|_| r.random_range(4..vocab)).collect();
            s.push(EOS);
            s
        })
        .collect()
}

fn with_bos(seqs: &[Vec<usize>]) -> Vec<Vec<usize>> {
    seqs.iter()
        .map(|s| std::iter::once(BOS).chain(s.iter().copied()).collect())
        .collect()
}

pub fn random_batch_pair(r: &mut ChaCha8Rng, n: usize, vocab: usize, max_len: usize) -> BatchPair {
    let src = random_sequences(r, n, vocab, max_len);
    let tgt = with_bos(&random_sequences(r, n, vocab, max_len));
    BatchPair {
        src: Batch::from_sequences(&src),
        tgt: Batch::from_sequences(&tgt),
        indices: (0..n).collect(),
    }
}

fn bits_equal<F: Float>(a: &ModelWeights<F>, b: &ModelWeights<F>) -> Result<(), String> {
    let (pa, pb) = (a.named_parameters(), b.named_parameters());
    ensure!(
        pa.len() == pb.len(),
        "tensor counts differ: {} vs {}",
        pa.len(),
        pb.len()
    );
    for ((na, ta), (nb, tb)) in pa.iter().zip(&pb) {
        ensure!(na == nb, "tensor order differs: {na} vs {nb}");
        ensure!(ta.shape() == tb.shape(), "{na}: shapes differ");
        let same = ta
            .data()
            .iter()
            .zip(tb.data())
            .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits());
        ensure!(same, "{na}: values differ");
    }
    Ok(())
}

// ---------------------------------------------------------------- parameters

fn random_model_config(r: &mut ChaCha8Rng) -> ModelConfig {
    let n_heads = [1, 2, 4, 8][r.random_range(0..4)];
    let d_model = n_heads * r.random_range(1..=16);
    let src_vocab_size = r.random_range(5..400);
    let share = r.random_bool(0.5);
    ModelConfig {
        d_model,
        d_ff: r.random_range(1..=256),
        n_heads,
        stacking: StackingMode::recurrent(1),
        src_vocab_size,
        tgt_vocab_size: if share {
            src_vocab_size
        } else {
            r.random_range(5..400)
        },
        share_src_tgt_embedding: share,
        tie_output_projection: r.random_bool(0.5),
        dropout: 0.0,
        max_positions: 16,
    }
}

/// Recurrent stacks cost one layer per side regardless of depth; vanilla
/// stacks grow by one encoder and one decoder layer per unit of depth.
pub fn parameter_identity() -> Outcome {
    let start = Instant::now();
    let mut r = rng(11);
    for case in 0..20 {
        let cfg = random_model_config(&mut r);
        let (d, f, vs, vt) = (
            cfg.d_model,
            cfg.d_ff,
            cfg.src_vocab_size,
            cfg.tgt_vocab_size,
        );
        let mut shared = vs * d;
        if !cfg.share_src_tgt_embedding {
            shared += vt * d;
        }
        if !cfg.tie_output_projection {
            shared += d * vt;
        }
        let ffn = 2 * d * f + f + d;
        let enc = 4 * d * d + ffn + 4 * d;
        let dec = 8 * d * d + ffn + 6 * d;
        let vanilla1 = count_parameters(&cfg.with_stacking(StackingMode::vanilla(1)));
        ensure!(
            vanilla1 == shared + enc + dec,
            "case {case}: vanilla(1) count {vanilla1}"
        );
        for k in [1, 2, 6, 24] {
            let rs = cfg.with_stacking(StackingMode::recurrent(k));
            let counted = count_parameters(&rs);
            ensure!(
                counted == vanilla1,
                "case {case}: RS({k}) has {counted}, vanilla(1) {vanilla1}"
            );
            let built = build_model::<f32>(&rs, case)
                .map_err(err)?
                .parameter_count();
            ensure!(
                built == counted,
                "case {case}: RS({k}) built {built} vs counted {counted}"
            );
        }
        let mut previous = 0;
        for n in 1..=6 {
            let v = cfg.with_stacking(StackingMode::vanilla(n));
            let counted = count_parameters(&v);
            ensure!(
                counted == shared + n * (enc + dec),
                "case {case}: vanilla({n}) count {counted}"
            );
            ensure!(
                counted > previous,
                "case {case}: vanilla({n}) not above vanilla({})",
                n - 1
            );
            if n <= 3 {
                let built = build_model::<f32>(&v, case).map_err(err)?.parameter_count();
                ensure!(
                    built == counted,
                    "case {case}: vanilla({n}) built {built} vs counted {counted}"
                );
            }
            previous = counted;
        }
    }
    within(Duration::from_secs(1), start, "parameter identity")?;
    Ok(format!("20 configs in {:.0?}", start.elapsed()))
}

// ----------------------------------------------------------------- unrolling

/// A vanilla model whose k layers per side are copies of the recurrent layer.
pub fn tied_copy<F: Float>(rs: &ModelWeights<F>) -> ModelWeights<F> {
    let k = rs.config.stacking.encoder_depth();
    let mut v = rs.clone();
    v.config = rs.config.with_stacking(StackingMode::vanilla(k));
    v.encoder_layers = vec![rs.encoder_layers[0].clone(); k];
    v.decoder_layers = vec![rs.decoder_layers[0].clone(); k];
    v
}

fn layer_key(name: &str) -> String {
    // encoder.3.ffn.w1 -> encoder.*.ffn.w1
    let mut parts: Vec<&str> = name.split('.').collect();
    if parts.len() > 2 && (parts[0] == "encoder" || parts[0] == "decoder") {
        parts[1] = "*";
    }
    parts.join(".")
}

pub fn unrolling_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(21);
    let mut worst_fwd = 0.0f64;
    let mut worst_grad = 0.0f64;
    for k in [1, 2, 3, 6] {
        for trial in 0..3u64 {
            let cfg = tiny_config(StackingMode::recurrent(k), 23, trial % 2 == 0);
            let rs = build_model::<f32>(&cfg, 100 * k as u64 + trial).map_err(err)?;
            let van = tied_copy(&rs);
            let bp = random_batch_pair(&mut r, 3, 23, 7);
            let (tgt_in, _) = bp.teacher_forcing();
            let enc_rs = encode(&rs, &bp.src, None, false).map_err(err)?;
            let enc_v = encode(&van, &bp.src, None, false).map_err(err)?;
            let lr =
                decode_forward(&rs, &enc_rs.hidden, &bp.src, &tgt_in, None, false).map_err(err)?;
            let lv =
                decode_forward(&van, &enc_v.hidden, &bp.src, &tgt_in, None, false).map_err(err)?;
            for (a, b) in enc_rs
                .hidden
                .data()
                .iter()
                .zip(enc_v.hidden.data())
                .chain(lr.logits.data().iter().zip(lv.logits.data()))
            {
                worst_fwd = worst_fwd.max((a - b).abs() as f64);
            }
            ensure!(
                worst_fwd <= 1e-5,
                "RS({k}) forward differs from tied copy by {worst_fwd:e}"
            );

            // gradients in f64: the shared layer receives the sum over its applications
            let rs64 = rs.cast::<f64>();
            let van64 = tied_copy(&rs64);
            let (loss_rs, g_rs) = compute_gradients(&rs64, &bp, 0.1, None).map_err(err)?;
            let (loss_v, g_v) = compute_gradients(&van64, &bp, 0.1, None).map_err(err)?;
            ensure!(
                (loss_rs - loss_v).abs() <= 1e-12,
                "RS({k}) loss {loss_rs} vs tied copy {loss_v}"
            );
            let mut summed: HashMap<String, Vec<f64>> = HashMap::new();
            for ((name, _), g) in van64.named_parameters().iter().zip(&g_v) {
                let slot = summed
                    .entry(layer_key(name))
                    .or_insert_with(|| vec![0.0; g.len()]);
                slot.iter_mut().zip(g).for_each(|(s, x)| *s += x);
            }
            for ((name, _), g) in rs64.named_parameters().iter().zip(&g_rs) {
                let expect = &summed[&layer_key(name)];
                let scale = expect.iter().fold(1.0f64, |m, x| m.max(x.abs()));
                for (a, b) in g.iter().zip(expect) {
                    worst_grad = worst_grad.max((a - b).abs() / scale);
                }
                ensure!(
                    worst_grad <= 1e-10,
                    "RS({k}) gradient of {name} differs by {worst_grad:e}"
                );
            }
        }
    }
    within(Duration::from_secs(10), start, "unrolling")?;
    Ok(format!(
        "max forward diff {worst_fwd:.1e}, max gradient diff {worst_grad:.1e} in {:.1?}",
        start.elapsed()
    ))
}

// ------------------------------------------------------------ gradient check

type Build = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Var;

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.5..1.5)).with_requires_grad(true)
}

/// `Σ out ⊙ weights` so every output element contributes a distinct weight.
fn probe(tape: &mut Tape<'_, f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w).expect("probe shape");
    tape.sum(p)
}

fn output_shape(inputs: &[Tensor<f64>], build: &Build) -> Vec<usize> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars);
    tape.shape(out).to_vec()
}

fn scalar(inputs: &[Tensor<f64>], build: &Build, weights: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars);
    let s = probe(&mut tape, out, weights);
    tape.value(s)[0]
}

/// Norm-wise relative error between analytic and central-difference gradients
/// over every element of every differentiable input.
fn relative_error(r: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, build: &Build) -> f64 {
    let shape = output_shape(&inputs, build);
    let weights = Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0));
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars);
        let s = probe(&mut tape, out, &weights);
        tape.backward(s).expect("backward");
        vars.iter()
            .zip(&inputs)
            .map(|(&v, t)| {
                t.requires_grad().then(|| {
                    tape.grad(v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or(vec![0.0; t.numel()])
                })
            })
            .collect()
    };
    let h = 1e-6;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (i, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for (j, &g) in grad.iter().enumerate() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric =
                (scalar(&plus, build, &weights) - scalar(&minus, build, &weights)) / (2.0 * h);
            diff += (g - numeric).powi(2);
            norm += g.powi(2) + numeric.powi(2);
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

fn dims(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(1..=5)).collect()
}

/// One randomized case of the named op: inputs plus a graph builder.
fn op_case(op: &str, r: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    match op {
        "matmul" => {
            let (m, k, n) = (
                r.random_range(1..=5),
                r.random_range(1..=5),
                r.random_range(1..=5),
            );
            let (ta, tb) = (r.random_bool(0.5), r.random_bool(0.5));
            let a = random_tensor(r, &if ta { [k, m] } else { [m, k] });
            let b = random_tensor(r, &if tb { [n, k] } else { [k, n] });
            (
                vec![a, b],
                Box::new(move |t, v| t.matmul_t(v[0], v[1], ta, tb).unwrap()),
            )
        }
        "bmm" => {
            let (g, m, k, n) = (
                r.random_range(1..=3),
                r.random_range(1..=4),
                r.random_range(1..=4),
                r.random_range(1..=4),
            );
            let (ta, tb) = (r.random_bool(0.5), r.random_bool(0.5));
            let a = random_tensor(r, &if ta { [g, k, m] } else { [g, m, k] });
            let b = random_tensor(r, &if tb { [g, n, k] } else { [g, k, n] });
            (
                vec![a, b],
                Box::new(move |t, v| t.bmm(v[0], v[1], ta, tb).unwrap()),
            )
        }
        "add" => {
            let s = dims(r, 2);
            (
                vec![random_tensor(r, &s), random_tensor(r, &s)],
                Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
            )
        }
        "mul" => {
            let s = dims(r, 2);
            (
                vec![random_tensor(r, &s), random_tensor(r, &s)],
                Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
            )
        }
        "add_bias" => {
            let s = dims(r, 2);
            let b = random_tensor(r, &[s[1]]);
            (
                vec![random_tensor(r, &s), b],
                Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap()),
            )
        }
        "scale" => {
            let c = r.random_range(-2.0..2.0);
            let s = dims(r, 2);
            (
                vec![random_tensor(r, &s)],
                Box::new(move |t, v| t.scale(v[0], c)),
            )
        }
        "relu" => {
            // keep inputs away from the kink so the difference quotient is valid
            let s = dims(r, 2);
            let x = Tensor::from_fn(&s, |_| {
                let m = r.random_range(0.05..1.5);
                if r.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .with_requires_grad(true);
            (vec![x], Box::new(|t, v| t.relu(v[0])))
        }
        "softmax" => {
            let s = dims(r, 3);
            let axis = r.random_range(0..3);
            (
                vec![random_tensor(r, &s)],
                Box::new(move |t, v| t.softmax(v[0], axis).unwrap()),
            )
        }
        "masked_softmax" => {
            let s = dims(r, 2);
            let keep: Vec<bool> = (0..s[0] * s[1])
                .map(|i| i % s[1] == 0 || r.random_bool(0.7))
                .collect();
            (
                vec![random_tensor(r, &s)],
                Box::new(move |t, v| t.masked_softmax(v[0], &keep).unwrap()),
            )
        }
        "layer_norm" => {
            let rows = r.random_range(1..=4);
            let n = r.random_range(2..=6);
            let x = random_tensor(r, &[rows, n]);
            let (g, b) = (random_tensor(r, &[n]), random_tensor(r, &[n]));
            (
                vec![x, g, b],
                Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap()),
            )
        }
        "embedding" => {
            let (vocab, d) = (r.random_range(2..=6), r.random_range(1..=4));
            let ids: Vec<usize> = (0..r.random_range(1..=6))
                .map(|_| r.random_range(0..vocab))
                .collect();
            (
                vec![random_tensor(r, &[vocab, d])],
                Box::new(move |t, v| t.embedding(v[0], &ids).unwrap()),
            )
        }
        "reshape" => {
            let s = dims(r, 3);
            let flat = [s[0] * s[1], s[2]];
            (
                vec![random_tensor(r, &s)],
                Box::new(move |t, v| t.reshape(v[0], &flat).unwrap()),
            )
        }
        "permute" => {
            let s = dims(r, 3);
            let perms = [
                [0, 2, 1],
                [1, 0, 2],
                [2, 1, 0],
                [1, 2, 0],
                [2, 0, 1],
                [0, 1, 2],
            ];
            let p = perms[r.random_range(0..perms.len())];
            (
                vec![random_tensor(r, &s)],
                Box::new(move |t, v| t.permute(v[0], &p).unwrap()),
            )
        }
        "sum" => {
            let s = dims(r, 2);
            (vec![random_tensor(r, &s)], Box::new(|t, v| t.sum(v[0])))
        }
        "cross_entropy" => {
            let (n, vocab) = (r.random_range(1..=5), r.random_range(2..=6));
            let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..vocab)).collect();
            let smoothing = if r.random_bool(0.5) {
                0.0
            } else {
                r.random_range(0.0..0.3)
            };
            // id 0 plays padding; a case where every target is padding is skipped
            let pad = if targets.iter().all(|&t| t == 0) {
                vocab
            } else {
                0
            };
            (
                vec![random_tensor(r, &[n, vocab])],
                Box::new(move |t, v| t.cross_entropy(v[0], &targets, smoothing, pad).unwrap()),
            )
        }
        other => panic!("unknown op {other}"),
    }
}

pub const OPS: [&str; 15] = [
    "matmul",
    "bmm",
    "add",
    "mul",
    "add_bias",
    "scale",
    "relu",
    "softmax",
    "masked_softmax",
    "layer_norm",
    "embedding",
    "reshape",
    "permute",
    "sum",
    "cross_entropy",
];

/// Whole-model loss against central differences on sampled coordinates.
fn model_relative_error(r: &mut ChaCha8Rng, case: u64) -> Result<f64, String> {
    let stacking = if case.is_multiple_of(2) {
        StackingMode::recurrent(1 + (case as usize / 2) % 3)
    } else {
        StackingMode::vanilla(1 + (case as usize / 2) % 2)
    };
    let mut cfg = tiny_config(stacking, 11, case % 4 < 2);
    cfg.d_model = 8;
    cfg.d_ff = 12;
    cfg.n_heads = 2;
    let w = build_model::<f64>(&cfg, case).map_err(err)?;
    let bp = random_batch_pair(r, 2, 11, 5);
    let (_, grads) = compute_gradients(&w, &bp, 0.1, None).map_err(err)?;
    let h = 1e-6;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (ti, g) in grads.iter().enumerate() {
        for _ in 0..4 {
            let j = r.random_range(0..g.len());
            let shifted = |delta: f64| {
                let mut p = w.clone();
                let mut k = 0;
                p.visit_mut(|_, t| {
                    if k == ti {
                        t.data_mut()[j] += delta;
                    }
                    k += 1;
                });
                compute_gradients(&p, &bp, 0.1, None).map(|x| x.0)
            };
            let numeric = (shifted(h).map_err(err)? - shifted(-h).map_err(err)?) / (2.0 * h);
            diff += (g[j] - numeric).powi(2);
            norm += g[j].powi(2) + numeric.powi(2);
        }
    }
    Ok(diff.sqrt() / norm.sqrt().max(1e-12))
}

pub fn gradient_check(cases: u64) -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for (i, op) in OPS.iter().enumerate() {
        let mut r = rng(1000 + i as u64);
        for case in 0..cases {
            let (inputs, build) = op_case(op, &mut r);
            let e = relative_error(&mut r, inputs, build.as_ref());
            ensure!(e < 1e-4, "{op} case {case}: relative error {e:e}");
            if e > worst.0 {
                worst = (e, op);
            }
        }
    }
    let mut r = rng(2000);
    for case in 0..cases {
        let e = model_relative_error(&mut r, case)?;
        ensure!(e < 1e-4, "model loss case {case}: relative error {e:e}");
        if e > worst.0 {
            worst = (e, "model");
        }
    }
    within(Duration::from_secs(60), start, "gradient check")?;
    Ok(format!(
        "{} ops + model x {cases} cases, worst {:.1e} ({}) in {:.1?}",
        OPS.len(),
        worst.0,
        worst.1,
        start.elapsed()
    ))
}

// ------------------------------------------------------------------ decoding

/// Every sequence of at most two tokens over a random next-token table.
fn exhaustive_two_step(
    table: &HashMap<Vec<usize>, Vec<f64>>,
    alpha: f64,
    eos: usize,
) -> Hypothesis {
    let mut all = Vec::new();
    for (a, &la) in table[&vec![]].iter().enumerate() {
        if a == eos {
            all.push((vec![a], la, true));
            continue;
        }
        for (b, &lb) in table[&vec![a]].iter().enumerate() {
            all.push((vec![a, b], 0.0 + la + lb, b == eos));
        }
    }
    all.into_iter()
        .map(|(tokens, log_prob, finished)| Hypothesis {
            score: log_prob / length_penalty(tokens.len(), alpha),
            tokens,
            log_prob,
            finished,
        })
        .min_by(|x, y| {
            y.score
                .partial_cmp(&x.score)
                .unwrap()
                .then_with(|| x.tokens.cmp(&y.tokens))
        })
        .unwrap()
}

fn random_log_probs(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let x: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    x.iter().map(|v| v - z).collect()
}

pub fn decoding_oracles() -> Outcome {
    let start = Instant::now();

    // beam 1 without length penalty is greedy search
    let mut pairs = 0;
    for seed in 0..10u64 {
        let cfg = tiny_config(
            StackingMode::recurrent(1 + seed as usize % 3),
            19,
            seed % 2 == 0,
        );
        let w = build_model::<f32>(&cfg, 500 + seed).map_err(err)?;
        let mut r = rng(600 + seed);
        let srcs = random_sequences(&mut r, 10, 19, 8);
        let dc = DecodeConfig {
            max_len_a: 3,
            max_len_b: 1.0,
            ..DecodeConfig::greedy()
        };
        let greedy = greedy_decode(&w, &Batch::from_sequences(&srcs), &dc).map_err(err)?;
        for (i, s) in srcs.iter().enumerate() {
            let beam = beam_decode(&w, &Batch::from_sequences(std::slice::from_ref(s)), &dc)
                .map_err(err)?;
            let (g, b) = (&greedy.translations[i], &beam.translations[0]);
            ensure!(
                g.tokens == b.tokens && g.finished == b.finished,
                "seed {seed} sentence {i}: greedy {:?} vs beam-1 {:?}",
                g.tokens,
                b.tokens
            );
            pairs += 1;
        }
    }

    // decoding at the trained depth through the override path changes nothing
    for k in [1, 2, 4] {
        let cfg = tiny_config(StackingMode::recurrent(k), 19, true);
        let w = build_model::<f32>(&cfg, 700 + k as u64).map_err(err)?;
        let mut r = rng(800 + k as u64);
        let src = Batch::from_sequences(&random_sequences(&mut r, 6, 19, 8));
        let prefix = Batch::from_sequences(&with_bos(&random_sequences(&mut r, 6, 19, 6)));
        let e0 = encode(&w, &src, None, false).map_err(err)?;
        let e1 = encode(&w, &src, Some(k), false).map_err(err)?;
        ensure!(
            e0.hidden.data() == e1.hidden.data(),
            "RS({k}) encoder override differs"
        );
        let d0 = decode_forward(&w, &e0.hidden, &src, &prefix, None, false).map_err(err)?;
        let d1 = decode_forward(&w, &e1.hidden, &src, &prefix, Some(k), false).map_err(err)?;
        let same = d0
            .logits
            .data()
            .iter()
            .zip(d1.logits.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same, "RS({k}) decoder override logits differ");
        for beam_size in [1, 3] {
            let base = DecodeConfig {
                beam_size,
                alpha: 0.6,
                ..DecodeConfig::default()
            };
            let over = DecodeConfig {
                enc_recurrences: Some(k),
                dec_recurrences: Some(k),
                ..base.clone()
            };
            let a = beam_decode(&w, &src, &base).map_err(err)?;
            let b = beam_decode(&w, &src, &over).map_err(err)?;
            for (x, y) in a.translations.iter().zip(&b.translations) {
                ensure!(
                    x.tokens == y.tokens && x.score.to_bits() == y.score.to_bits(),
                    "RS({k}) beam {beam_size}: override output differs"
                );
            }
        }
    }

    // a full-width beam over a two-step tree finds the exhaustive optimum
    let mut r = rng(900);
    let vocab = 4;
    let eos = 0;
    for tree in 0..200 {
        let mut table = HashMap::new();
        table.insert(vec![], random_log_probs(&mut r, vocab));
        for a in 0..vocab {
            table.insert(vec![a], random_log_probs(&mut r, vocab));
        }
        let alpha = [0.0, 0.6, 1.0, r.random_range(0.0..2.0)][tree % 4];
        let oracle = exhaustive_two_step(&table, alpha, eos);
        let step = |ps: &[&[usize]]| Ok(ps.iter().map(|p| table[&p.to_vec()].clone()).collect());
        let found = beam_search(vocab, alpha, 2, eos, step).map_err(err)?.best;
        ensure!(
            found == oracle,
            "tree {tree} (alpha {alpha}): beam {:?} {:.6} vs exhaustive {:?} {:.6}",
            found.tokens,
            found.score,
            oracle.tokens,
            oracle.score
        );
    }
    within(Duration::from_secs(30), start, "decoding oracles")?;
    Ok(format!(
        "{pairs} greedy/beam-1 pairs, overrides, 200 trees in {:.1?}",
        start.elapsed()
    ))
}

// --------------------------------------------------- averaging and transfer

fn quantize(w: &mut ModelWeights<f64>) {
    let q = (1u64 << 24) as f64;
    w.visit_mut(|_, t| {
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x = (*x * q).round() / q)
    });
}

pub fn checkpoint_oracles(dir: &Path) -> Outcome {
    let cfg = tiny_config(StackingMode::vanilla(2), 17, false);

    // averaging: with dyadic values every partial sum is exact, so the
    // oracle sum/n is the correctly rounded mean
    let n = 5;
    let models: Vec<ModelWeights<f64>> = (0..n)
        .map(|i| {
            let mut w = build_model::<f64>(&cfg, 40 + i).unwrap();
            quantize(&mut w);
            w
        })
        .collect();
    let cks: Vec<Checkpoint> = models
        .iter()
        .enumerate()
        .map(|(i, w)| Checkpoint::from_weights(w, i as u64))
        .collect();
    let avg = average_checkpoints(&cks)
        .map_err(err)?
        .to_weights::<f64>()
        .map_err(err)?;
    let params: Vec<Vec<(String, &Tensor<f64>)>> =
        models.iter().map(|m| m.named_parameters()).collect();
    for (ti, (name, t)) in avg.named_parameters().into_iter().enumerate() {
        for (j, &got) in t.data().iter().enumerate() {
            let sum: f64 = params.iter().map(|p| p[ti].1.data()[j]).sum();
            let expect = sum / n as f64;
            ensure!(
                got.to_bits() == expect.to_bits(),
                "{name}[{j}]: average {got} vs mean {expect}"
            );
        }
    }
    // one copy repeated averages to itself
    let same = average_checkpoints(&vec![cks[0].clone(); 3])
        .map_err(err)?
        .to_weights::<f64>()
        .map_err(err)?;
    bits_equal(&same, &models[0]).map_err(|e| format!("averaging identical checkpoints: {e}"))?;

    // save/load is bit-exact in both precisions
    let w32 = build_model::<f32>(&cfg, 3).map_err(err)?;
    let w64 = build_model::<f64>(&cfg, 3).map_err(err)?;
    let (p32, p64) = (dir.join("m32.rsnmt"), dir.join("m64.rsnmt"));
    Checkpoint::from_weights(&w32, 7).save(&p32).map_err(err)?;
    Checkpoint::from_weights(&w64, 7).save(&p64).map_err(err)?;
    let l32 = Checkpoint::load(&p32).map_err(err)?;
    let l64 = Checkpoint::load(&p64).map_err(err)?;
    ensure!(
        l32.to_bytes().map_err(err)? == std::fs::read(&p32).map_err(err)?,
        "f32 re-serialization differs"
    );
    bits_equal(&l32.to_weights::<f32>().map_err(err)?, &w32)?;
    bits_equal(&l64.to_weights::<f64>().map_err(err)?, &w64)?;

    // layer transfer copies the chosen teacher layers exactly
    let teacher_cfg = tiny_config(StackingMode::vanilla(4), 17, false);
    let teacher = build_model::<f32>(&teacher_cfg, 9).map_err(err)?;
    let student_cfg = teacher_cfg.with_stacking(StackingMode::recurrent(2));
    let mut copies = 0;
    for l_enc in 1..=4 {
        for l_dec in 1..=4 {
            let s = init_from_teacher(
                &student_cfg,
                &teacher,
                &TransferConfig::new(l_enc, l_dec),
                1,
            )
            .map_err(err)?;
            let mut got = s.clone();
            got.encoder_layers = vec![s.encoder_layers[0].clone()];
            let mut want = s.clone();
            want.encoder_layers = vec![teacher.encoder_layers[l_enc - 1].clone()];
            want.decoder_layers = vec![teacher.decoder_layers[l_dec - 1].clone()];
            want.src_embedding = teacher.src_embedding.clone();
            want.tgt_embedding = teacher.tgt_embedding.clone();
            want.output_projection = teacher.output_projection.clone();
            bits_equal(&got, &want).map_err(|e| format!("transfer ({l_enc}, {l_dec}): {e}"))?;
            copies += 1;
        }
    }
    for (l_enc, l_dec) in [(0, 1), (1, 0), (5, 1), (1, 5)] {
        let r = init_from_teacher(
            &student_cfg,
            &teacher,
            &TransferConfig::new(l_enc, l_dec),
            1,
        );
        ensure!(
            matches!(r, Err(rsnmt::Error::InvalidArgument(_))),
            "transfer ({l_enc}, {l_dec}) should be rejected"
        );
    }
    Ok(format!(
        "exact mean of {n}, bit-exact save/load, {copies} transfers, 4 rejections"
    ))
}

// ------------------------------------------------------ evaluation analytics

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn analysis_oracles(dir: &Path) -> Outcome {
    let b = |h: &[&str], r: &[&str]| bleu(h, r, 4, false).map(|x| x.bleu).map_err(err);
    ensure!(
        close(
            b(&["the cat sat on the mat"], &["the cat sat on the mat"])?,
            100.0,
            1e-9
        ),
        "identity BLEU"
    );
    ensure!(b(&["a b c d"], &["e f g h"])? == 0.0, "disjoint BLEU");
    // p = 5/6, 4/5, 3/4, 2/3 -> (1/3)^(1/4)
    let one_off = b(&["a b c d e f"], &["a b c d e g"])?;
    ensure!(
        close(one_off, 100.0 * (1.0f64 / 3.0).powf(0.25), 1e-9),
        "one-off BLEU {one_off}"
    );
    // perfect precision, brevity penalty exp(1 - 6/4)
    let short = b(&["a b c d"], &["a b c d e f"])?;
    ensure!(
        close(short, 100.0 * (-0.5f64).exp(), 1e-9),
        "brevity BLEU {short}"
    );
    // corpus statistics pool before the geometric mean
    let pooled = b(&["a b c d e f", "x y z w"], &["a b c d e g", "x y z w"])?;
    let expect = 100.0 * ((9.0 / 10.0) * (7.0 / 8.0) * (5.0 / 6.0) * (3.0 / 4.0f64)).powf(0.25);
    ensure!(
        close(pooled, expect, 1e-9),
        "pooled BLEU {pooled} vs {expect}"
    );
    ensure!(b(&["A B"], &["a b"])? == 0.0, "cased BLEU should not match");
    ensure!(
        bleu(&["x"], &["x", "y"], 4, false).is_err(),
        "length mismatch accepted"
    );

    let h = |row: &[f64]| attention_entropy(row).map_err(err);
    for n in 1..=16 {
        let row = vec![1.0 / n as f64; n];
        ensure!(
            close(h(&row)?, (n as f64).ln(), 1e-12),
            "uniform entropy over {n}"
        );
    }
    ensure!(h(&[0.0, 1.0, 0.0])? == 0.0, "one-hot entropy");
    ensure!(
        close(h(&[0.5, 0.25, 0.25])?, 1.5 * 2f64.ln(), 1e-12),
        "dyadic entropy"
    );
    ensure!(
        attention_entropy(&[0.5, 0.2]).is_err(),
        "non-distribution accepted"
    );

    let layer = |index, rows: Vec<Vec<f64>>| LayerAttention {
        index,
        heads: vec![HeadAttention { index: 0, rows }],
    };
    let trace = AttentionTrace {
        layers: vec![
            layer(0, vec![vec![1.0, 0.0]]),
            layer(1, vec![vec![0.0, 1.0]]),
            layer(2, vec![vec![0.0, 1.0]]),
        ],
    };
    let stats = AttentionStats::from_trace(&trace).map_err(err)?;
    ensure!(
        stats.recurrence_l1 == vec![2.0, 0.0],
        "recurrence L1 {:?}",
        stats.recurrence_l1
    );

    // attention captured during decoding is row-stochastic
    let mut worst = 0.0f64;
    let mut traces = 0;
    for k in [1, 3] {
        let cfg = tiny_config(StackingMode::recurrent(k), 19, true);
        let w = build_model::<f32>(&cfg, 70 + k as u64).map_err(err)?;
        let mut r = rng(71);
        let vocab = Vocabulary::from_tokens((4..19).map(|i| format!("w{i}")));
        let sentences: Vec<String> = random_sequences(&mut r, 12, 19, 7)
            .iter()
            .map(|s| vocab.decode(&s[..s.len() - 1]))
            .collect();
        for beam_size in [1, 4] {
            let dc = DecodeConfig {
                beam_size,
                alpha: if beam_size == 1 { 0.0 } else { 0.6 },
                max_len_a: 4,
                max_len_b: 1.0,
                capture_attention: true,
                ..DecodeConfig::default()
            };
            let out = translate(&w, &vocab, &sentences, &dc).map_err(err)?;
            for t in &out.translations {
                let trace = t.attention.as_ref().ok_or("attention not captured")?;
                ensure!(
                    trace.layers.len() == k,
                    "trace has {} layers, expected {k}",
                    trace.layers.len()
                );
                worst = worst.max(trace.max_row_sum_error());
                traces += 1;
            }
            ensure!(worst <= 1e-6, "attention row sum off by {worst:e}");
            if k == 3 && beam_size == 4 {
                let t = &out.translations[0];
                let trace = t.attention.clone().unwrap();
                let stats = AttentionStats::from_trace(&trace).map_err(err)?;
                let src: Vec<String> = sentences[0].split_whitespace().map(str::to_owned).collect();
                let tgt: Vec<String> = (0..trace.layers[0].heads[0].rows.len())
                    .map(|i| format!("y{i}"))
                    .collect();
                let exported = export_attention(&trace, &stats, &src, &tgt, 0, dir).map_err(err)?;
                let doc = AttentionDocument::load(&exported.json).map_err(err)?;
                ensure!(
                    doc.trace() == trace,
                    "attention JSON round trip changed the trace"
                );
                ensure!(
                    doc.entropies == stats.mean,
                    "entropy summary changed in JSON"
                );
                ensure!(
                    exported.svgs.len() == k && exported.svgs.iter().all(|p| p.is_file()),
                    "missing heatmaps"
                );
            }
        }
    }
    Ok(format!(
        "BLEU/entropy oracles, {traces} traces within {worst:.1e}, JSON round trip"
    ))
}

// -------------------------------------------------------------- determinism

fn toy_corpus(pairs: usize, seed: u64) -> ParallelCorpus {
    generate(&ToySpec {
        task: ToyTask::Reversal,
        pairs,
        vocab_size: 12,
        min_len: 2,
        max_len: 6,
        seed,
        noise: 0.0,
    })
    .unwrap()
}

pub fn toy_vocab(corpus: &ParallelCorpus) -> Vocabulary {
    let mut all = corpus.sources();
    all.extend(corpus.targets());
    Vocabulary::build(&all, 1000).unwrap()
}

fn train_run(
    dir: &Path,
    corpus: &ParallelCorpus,
    vocab: &Vocabulary,
) -> Result<Vec<Vec<u8>>, String> {
    let mut cfg = tiny_config(StackingMode::recurrent(2), vocab.len(), true);
    cfg.dropout = 0.1;
    let mut w = build_model::<f32>(&cfg, 5).map_err(err)?;
    let tc = TrainConfig {
        total_steps: 30,
        warmup_steps: 10,
        base_lr: 0.5,
        checkpoint_every: 10,
        keep_last: 5,
        batch_size_tokens: 120,
        seed: 17,
        ..TrainConfig::default()
    };
    let sink = CheckpointSink {
        dir,
        provenance: Provenance::default(),
    };
    let report = train(
        &mut w,
        &EncodedCorpus::new(corpus, vocab, vocab),
        &tc,
        Some(sink),
        |_, _| {},
    )
    .map_err(err)?;
    ensure!(
        report.checkpoints.len() == 3,
        "expected 3 checkpoints, got {}",
        report.checkpoints.len()
    );
    report
        .checkpoints
        .iter()
        .map(|p| std::fs::read(p).map_err(err))
        .collect()
}

pub fn determinism(dir: &Path) -> Outcome {
    let corpus = toy_corpus(120, 3);
    let vocab = toy_vocab(&corpus);
    let a = train_run(&dir.join("a"), &corpus, &vocab)?;
    let b = train_run(&dir.join("b"), &corpus, &vocab)?;
    ensure!(a == b, "checkpoints of identical runs differ");

    let teacher = build_model::<f32>(&tiny_config(StackingMode::vanilla(2), vocab.len(), true), 8)
        .map_err(err)?;
    let dc = DistillConfig {
        decode: DecodeConfig {
            beam_size: 3,
            max_len_a: 3,
            max_len_b: 1.0,
            ..DecodeConfig::default()
        },
        mix_original: false,
        sample_size: 40,
        seed: 99,
    };
    let (c1, r1) = distill_corpus(&teacher, &vocab, &vocab, &corpus, &dc).map_err(err)?;
    let (c2, r2) = distill_corpus(&teacher, &vocab, &vocab, &corpus, &dc).map_err(err)?;
    ensure!(c1 == c2, "distilled corpora differ");
    ensure!(r1 == r2, "distillation reports differ");
    Ok(format!(
        "{} identical checkpoints, identical {}-pair distilled corpus",
        a.len(),
        c1.len()
    ))
}
