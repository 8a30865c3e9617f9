use rand_chacha::ChaCha8Rng;

use super::weights::{AttentionVars, LayerVars, ModelVars, ModelWeights, NormVars};
use crate::analysis::{AttentionTrace, HeadAttention, LayerAttention};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Dropout source for a training forward pass; `None` disables dropout.
pub struct ForwardCtx<'r> {
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl ForwardCtx<'_> {
    pub fn eval() -> ForwardCtx<'static> {
        ForwardCtx { rng: None }
    }
}

/// Raw `[B, h, Tq, Tk]` attention probabilities of one layer application.
pub(crate) struct RawAttention {
    probs: Vec<f64>,
    heads: usize,
    tq: usize,
    tk: usize,
}

/// Which attention maps to keep during a forward pass.
#[derive(Default)]
pub(crate) struct Capture {
    pub enabled: bool,
    pub maps: Vec<RawAttention>,
}

impl Capture {
    fn on(enabled: bool) -> Self {
        Capture {
            enabled,
            maps: Vec::new(),
        }
    }

    /// Splits captured maps into one trace per batch row, trimming to the
    /// real query/key lengths.
    fn into_traces(self, q_lengths: &[usize], k_lengths: &[usize]) -> Vec<AttentionTrace> {
        (0..q_lengths.len())
            .map(|b| AttentionTrace {
                layers: self
                    .maps
                    .iter()
                    .enumerate()
                    .map(|(depth, m)| LayerAttention {
                        index: depth,
                        heads: (0..m.heads)
                            .map(|h| HeadAttention {
                                index: h,
                                rows: (0..q_lengths[b].min(m.tq))
                                    .map(|t| {
                                        let base = ((b * m.heads + h) * m.tq + t) * m.tk;
                                        m.probs[base..base + k_lengths[b].min(m.tk)].to_vec()
                                    })
                                    .collect(),
                            })
                            .collect(),
                    })
                    .collect(),
            })
            .collect()
    }
}

struct Dims {
    batch: usize,
    d_model: usize,
    heads: usize,
}

fn split_heads<F: Float>(tape: &mut Tape<'_, F>, x: Var, dims: &Dims, len: usize) -> Result<Var> {
    let dk = dims.d_model / dims.heads;
    let x = tape.reshape(x, &[dims.batch, len, dims.heads, dk])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[dims.batch * dims.heads, len, dk])
}

#[allow(clippy::too_many_arguments)]
fn attention<F: Float>(
    tape: &mut Tape<'_, F>,
    w: &AttentionVars,
    query_in: Var,
    kv_in: Var,
    dims: &Dims,
    tq: usize,
    tk: usize,
    keep: &[bool],
    dropout: f64,
    ctx: &mut ForwardCtx<'_>,
    capture: &mut Capture,
) -> Result<Var> {
    let dk = dims.d_model / dims.heads;
    let q = tape.matmul(query_in, w.query)?;
    let k = tape.matmul(kv_in, w.key)?;
    let v = tape.matmul(kv_in, w.value)?;
    let q = split_heads(tape, q, dims, tq)?;
    let k = split_heads(tape, k, dims, tk)?;
    let v = split_heads(tape, v, dims, tk)?;
    let scores = tape.bmm(q, k, false, true)?;
    let scores = tape.scale(scores, F::of(1.0 / (dk as f64).sqrt()));
    let probs = tape.masked_softmax(scores, keep)?;
    if capture.enabled {
        capture.maps.push(RawAttention {
            probs: tape.value(probs).iter().map(|v| v.as_f64()).collect(),
            heads: dims.heads,
            tq,
            tk,
        });
    }
    let probs = match ctx.rng.as_deref_mut() {
        Some(rng) => tape.dropout(probs, dropout, rng),
        None => probs,
    };
    let mixed = tape.bmm(probs, v, false, false)?;
    let mixed = tape.reshape(mixed, &[dims.batch, dims.heads, tq, dk])?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = tape.reshape(mixed, &[dims.batch * tq, dims.d_model])?;
    tape.matmul(mixed, w.output)
}

fn residual_norm<F: Float>(
    tape: &mut Tape<'_, F>,
    x: Var,
    sub: Var,
    norm: &NormVars,
    dropout: f64,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let sub = match ctx.rng.as_deref_mut() {
        Some(rng) => tape.dropout(sub, dropout, rng),
        None => sub,
    };
    let y = tape.add(x, sub)?;
    tape.layer_norm(y, norm.gain, norm.bias, F::of(LAYER_NORM_EPS))
}

fn feed_forward<F: Float>(tape: &mut Tape<'_, F>, l: &LayerVars, x: Var) -> Result<Var> {
    let h = tape.matmul(x, l.w1)?;
    let h = tape.add_bias(h, l.b1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, l.w2)?;
    tape.add_bias(h, l.b2)
}

/// Attention keep-mask `[B, h, Tq, Tk]`.
fn keep_mask(
    batch: usize,
    heads: usize,
    tq: usize,
    key_mask: &[bool],
    tk: usize,
    causal: bool,
) -> Vec<bool> {
    let mut keep = Vec::with_capacity(batch * heads * tq * tk);
    for b in 0..batch {
        for _ in 0..heads {
            for t in 0..tq {
                for s in 0..tk {
                    keep.push(key_mask[b * tk + s] && (!causal || s <= t));
                }
            }
        }
    }
    keep
}

fn embed<F: Float>(
    tape: &mut Tape<'_, F>,
    w: &ModelWeights<F>,
    table: Var,
    batch: &Batch,
    dropout: f64,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let d = w.config.d_model;
    if batch.max_len > w.config.max_positions {
        return Err(Error::SentenceTooLong {
            index: 0,
            len: batch.max_len,
            max: w.config.max_positions,
        });
    }
    let x = tape.embedding(table, &batch.ids)?;
    let x = tape.scale(x, F::of((d as f64).sqrt()));
    let pos = &w.positions.data()[..batch.max_len * d];
    let tiled = Tensor::new(
        vec![batch.batch_size * batch.max_len, d],
        pos.iter()
            .copied()
            .cycle()
            .take(batch.batch_size * batch.max_len * d)
            .collect(),
    )?;
    let pos = tape.constant(tiled);
    let x = tape.add(x, pos)?;
    Ok(match ctx.rng.as_deref_mut() {
        Some(rng) => tape.dropout(x, dropout, rng),
        None => x,
    })
}

/// Runs the encoder stack on a tape; returns `[B·S × d]` hidden states.
pub(crate) fn encode_on<F: Float>(
    tape: &mut Tape<'_, F>,
    w: &ModelWeights<F>,
    vars: &ModelVars,
    src: &Batch,
    recurrences: Option<usize>,
    ctx: &mut ForwardCtx<'_>,
    capture: &mut Capture,
) -> Result<Var> {
    let cfg = &w.config;
    let depth = cfg.stacking.resolve_depth(recurrences, true)?;
    let dims = Dims {
        batch: src.batch_size,
        d_model: cfg.d_model,
        heads: cfg.n_heads,
    };
    let s = src.max_len;
    let keep = keep_mask(src.batch_size, cfg.n_heads, s, &src.mask, s, false);
    let mut x = embed(tape, w, vars.src_embedding, src, cfg.dropout, ctx)?;
    for i in 0..depth {
        let layer = &vars.encoder[if cfg.stacking.is_recurrent() { 0 } else { i }];
        let a = attention(
            tape,
            &layer.self_attn,
            x,
            x,
            &dims,
            s,
            s,
            &keep,
            cfg.dropout,
            ctx,
            capture,
        )?;
        x = residual_norm(tape, x, a, &layer.self_attn_norm, cfg.dropout, ctx)?;
        let f = feed_forward(tape, layer, x)?;
        x = residual_norm(tape, x, f, &layer.ffn_norm, cfg.dropout, ctx)?;
    }
    Ok(x)
}

/// Runs the decoder stack over `tgt` (teacher-forced prefix); returns
/// `[B·T × V]` logits. Cross-attention maps go to `capture`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn decode_on<F: Float>(
    tape: &mut Tape<'_, F>,
    w: &ModelWeights<F>,
    vars: &ModelVars,
    memory: Var,
    src_mask: &[bool],
    src_len: usize,
    tgt: &Batch,
    recurrences: Option<usize>,
    ctx: &mut ForwardCtx<'_>,
    capture: &mut Capture,
) -> Result<Var> {
    let cfg = &w.config;
    let depth = cfg.stacking.resolve_depth(recurrences, false)?;
    let dims = Dims {
        batch: tgt.batch_size,
        d_model: cfg.d_model,
        heads: cfg.n_heads,
    };
    if src_mask.len() != tgt.batch_size * src_len
        || tape.shape(memory) != [tgt.batch_size * src_len, cfg.d_model]
    {
        return Err(Error::shape(
            "decode",
            tape.shape(memory),
            &[tgt.batch_size * src_len, cfg.d_model],
        ));
    }
    let t = tgt.max_len;
    let self_keep = keep_mask(tgt.batch_size, cfg.n_heads, t, &tgt.mask, t, true);
    let cross_keep = keep_mask(tgt.batch_size, cfg.n_heads, t, src_mask, src_len, false);
    let mut no_capture = Capture::default();
    let mut x = embed(tape, w, vars.tgt_embedding, tgt, cfg.dropout, ctx)?;
    for i in 0..depth {
        let layer = &vars.decoder[if cfg.stacking.is_recurrent() { 0 } else { i }];
        let a = attention(
            tape,
            &layer.self_attn,
            x,
            x,
            &dims,
            t,
            t,
            &self_keep,
            cfg.dropout,
            ctx,
            &mut no_capture,
        )?;
        x = residual_norm(tape, x, a, &layer.self_attn_norm, cfg.dropout, ctx)?;
        let (cross, cross_norm) = layer
            .cross
            .as_ref()
            .ok_or_else(|| Error::Structure("decoder layer without cross-attention".into()))?;
        let c = attention(
            tape,
            cross,
            x,
            memory,
            &dims,
            t,
            src_len,
            &cross_keep,
            cfg.dropout,
            ctx,
            capture,
        )?;
        x = residual_norm(tape, x, c, cross_norm, cfg.dropout, ctx)?;
        let f = feed_forward(tape, layer, x)?;
        x = residual_norm(tape, x, f, &layer.ffn_norm, cfg.dropout, ctx)?;
    }
    match vars.output_projection {
        Some(p) => tape.matmul(x, p),
        None => tape.matmul_t(x, vars.tgt_embedding, false, true),
    }
}

/// Encoder output plus optional per-sentence self-attention traces.
pub struct Encoded<F> {
    /// `[B × S × d]`
    pub hidden: Tensor<F>,
    pub traces: Option<Vec<AttentionTrace>>,
}

/// Encodes a source batch without tracking gradients.
pub fn encode<F: Float>(
    w: &ModelWeights<F>,
    src: &Batch,
    recurrences: Option<usize>,
    capture: bool,
) -> Result<Encoded<F>> {
    let mut tape = Tape::inference();
    let vars = ModelVars::bind(&mut tape, w);
    let mut cap = Capture::on(capture);
    let out = encode_on(
        &mut tape,
        w,
        &vars,
        src,
        recurrences,
        &mut ForwardCtx::eval(),
        &mut cap,
    )?;
    let hidden = Tensor::new(
        vec![src.batch_size, src.max_len, w.config.d_model],
        tape.value(out).to_vec(),
    )?;
    Ok(Encoded {
        hidden,
        traces: capture.then(|| cap.into_traces(&src.lengths, &src.lengths)),
    })
}

/// Decoder logits plus optional per-sentence cross-attention traces.
pub struct Decoded<F> {
    /// `[B × T × V]`
    pub logits: Tensor<F>,
    pub traces: Option<Vec<AttentionTrace>>,
}

/// Runs the decoder over a target prefix without tracking gradients.
pub fn decode_forward<F: Float>(
    w: &ModelWeights<F>,
    encoder_out: &Tensor<F>,
    src: &Batch,
    tgt_prefix: &Batch,
    recurrences: Option<usize>,
    capture: bool,
) -> Result<Decoded<F>> {
    let d = w.config.d_model;
    if encoder_out.shape() != [src.batch_size, src.max_len, d]
        || src.batch_size != tgt_prefix.batch_size
    {
        return Err(Error::shape(
            "decode_forward",
            encoder_out.shape(),
            &[tgt_prefix.batch_size, src.max_len, d],
        ));
    }
    let mut tape = Tape::inference();
    let vars = ModelVars::bind(&mut tape, w);
    let flat = Tensor::new(
        vec![src.batch_size * src.max_len, d],
        encoder_out.data().to_vec(),
    )?;
    let memory = tape.constant(flat);
    let mut cap = Capture::on(capture);
    let logits = decode_on(
        &mut tape,
        w,
        &vars,
        memory,
        &src.mask,
        src.max_len,
        tgt_prefix,
        recurrences,
        &mut ForwardCtx::eval(),
        &mut cap,
    )?;
    let v = w.config.tgt_vocab_size;
    Ok(Decoded {
        logits: Tensor::new(
            vec![tgt_prefix.batch_size, tgt_prefix.max_len, v],
            tape.value(logits).to_vec(),
        )?,
        traces: capture.then(|| cap.into_traces(&tgt_prefix.lengths, &src.lengths)),
    })
}

/// Teacher-forced training loss for one batch on a fresh tape.
///
/// Returns the loss var and the bound parameter leaves; the caller runs
/// `backward` and collects gradients.
pub fn training_loss<'a, F: Float>(
    tape: &mut Tape<'a, F>,
    w: &'a ModelWeights<F>,
    src: &Batch,
    tgt_in: &Batch,
    targets: &[usize],
    label_smoothing: f64,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var, ModelVars)> {
    let vars = ModelVars::bind(tape, w);
    let mut cap = Capture::default();
    let memory = encode_on(tape, w, &vars, src, None, ctx, &mut cap)?;
    let logits = decode_on(
        tape,
        w,
        &vars,
        memory,
        &src.mask,
        src.max_len,
        tgt_in,
        None,
        ctx,
        &mut cap,
    )?;
    let loss = tape.cross_entropy(logits, targets, label_smoothing, crate::data::PAD)?;
    Ok((loss, vars))
}
