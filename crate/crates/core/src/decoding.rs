//! Greedy and beam-search inference.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::analysis::{bleu, AttentionTrace};
use crate::data::{Batch, Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{decode_forward, encode, Encoded, ModelWeights};
use crate::tensor::{Float, Tensor};

fn default_beam() -> usize {
    4
}
fn default_alpha() -> f64 {
    0.6
}
fn default_len_a() -> usize {
    10
}
fn default_len_b() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    #[serde(default = "default_beam")]
    pub beam_size: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Output length limit is `max_len_a + max_len_b · source tokens`.
    #[serde(default = "default_len_a")]
    pub max_len_a: usize,
    #[serde(default = "default_len_b")]
    pub max_len_b: f64,
    #[serde(default)]
    pub enc_recurrences: Option<usize>,
    #[serde(default)]
    pub dec_recurrences: Option<usize>,
    #[serde(default)]
    pub capture_attention: bool,
    #[serde(default)]
    pub timing: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: default_beam(),
            alpha: default_alpha(),
            max_len_a: default_len_a(),
            max_len_b: default_len_b(),
            enc_recurrences: None,
            dec_recurrences: None,
            capture_attention: false,
            timing: false,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig {
            beam_size: 1,
            alpha: 0.0,
            ..DecodeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        if self.max_len_b < 0.0 {
            return Err(Error::Config("max_len_b must be non-negative".into()));
        }
        if self.enc_recurrences == Some(0) || self.dec_recurrences == Some(0) {
            return Err(Error::Config(
                "recurrence overrides must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn check_for<F: Float>(&self, w: &ModelWeights<F>) -> Result<()> {
        self.validate()?;
        if !w.config.stacking.is_recurrent()
            && (self.enc_recurrences.is_some() || self.dec_recurrences.is_some())
        {
            return Err(Error::Config(
                "recurrence overrides apply only to recurrent models".into(),
            ));
        }
        Ok(())
    }

    /// Output token budget for a source of `src_tokens` tokens, capped so the
    /// decoder prefix fits the positional table.
    pub fn max_len(&self, src_tokens: usize, max_positions: usize) -> usize {
        let wanted = self.max_len_a + (self.max_len_b * src_tokens as f64).floor() as usize;
        wanted.clamp(1, max_positions.saturating_sub(1).max(1))
    }
}

/// `((5 + length) / 6)^alpha`.
pub fn length_penalty(length: usize, alpha: f64) -> f64 {
    ((5.0 + length as f64) / 6.0).powf(alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    /// Output ids without `<s>` and `</s>`.
    pub tokens: Vec<usize>,
    /// Whether the hypothesis ended with `</s>` rather than at the length limit.
    pub finished: bool,
    /// Sum of token log-probabilities (including `</s>`) over the length penalty.
    pub score: f64,
    /// Cross-attention of the output, one layer entry per decoder application.
    pub attention: Option<AttentionTrace>,
}

impl Translation {
    /// Length used for the penalty: output tokens plus `</s>` when present.
    pub fn scored_len(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub translations: Vec<Translation>,
    pub elapsed: Option<Duration>,
}

/// Log-softmax in f64 with `<pad>` and `<s>` excluded.
fn log_probs<F: Float>(logits: &[F]) -> Vec<f64> {
    let mut out: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    out[PAD] = f64::NEG_INFINITY;
    out[BOS] = f64::NEG_INFINITY;
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + out.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    out.iter_mut().for_each(|x| *x -= lse);
    out
}

/// Index of the largest value, lowest index on ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn source_tokens(src: &Batch, r: usize) -> usize {
    src.lengths[r].saturating_sub(2)
}

/// Repeats encoder rows: `rows[i]` selects which sentence fills row `i`.
fn gather_rows<F: Float>(
    enc: &Tensor<F>,
    src: &Batch,
    rows: &[usize],
) -> Result<(Tensor<F>, Batch)> {
    let per = src.max_len * enc.shape()[2];
    let mut data = Vec::with_capacity(rows.len() * per);
    let mut seqs = Vec::with_capacity(rows.len());
    for &r in rows {
        data.extend_from_slice(&enc.data()[r * per..(r + 1) * per]);
        seqs.push(src.row(r).to_vec());
    }
    let mut batch = Batch::from_sequences(&seqs);
    // keep the original padded width so encoder rows line up
    if batch.max_len != src.max_len {
        let mut ids = vec![PAD; rows.len() * src.max_len];
        for (i, s) in seqs.iter().enumerate() {
            ids[i * src.max_len..i * src.max_len + s.len()].copy_from_slice(s);
        }
        batch.mask = ids.iter().map(|&t| t != PAD).collect();
        batch.ids = ids;
        batch.max_len = src.max_len;
    }
    Ok((
        Tensor::new(vec![rows.len(), src.max_len, enc.shape()[2]], data)?,
        batch,
    ))
}

fn prefixes_batch(prefixes: &[&[usize]]) -> Batch {
    let seqs: Vec<Vec<usize>> = prefixes
        .iter()
        .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
        .collect();
    Batch::from_sequences(&seqs)
}

/// Next-token log-probabilities for each prefix; `rows[i]` names the source sentence.
fn next_log_probs<F: Float>(
    w: &ModelWeights<F>,
    enc: &Encoded<F>,
    src: &Batch,
    rows: &[usize],
    prefixes: &[&[usize]],
    dec_recurrences: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    let (memory, src_rows) = gather_rows(&enc.hidden, src, rows)?;
    let tgt = prefixes_batch(prefixes);
    let out = decode_forward(w, &memory, &src_rows, &tgt, dec_recurrences, false)?;
    let v = w.config.tgt_vocab_size;
    Ok((0..rows.len())
        .map(|i| {
            let t = tgt.lengths[i] - 1;
            let at = (i * tgt.max_len + t) * v;
            log_probs(&out.logits.data()[at..at + v])
        })
        .collect())
}

/// Cross-attention of each finished output, teacher-forced in one pass.
fn capture_attention<F: Float>(
    w: &ModelWeights<F>,
    enc: &Encoded<F>,
    src: &Batch,
    outputs: &mut [Translation],
    dec_recurrences: Option<usize>,
) -> Result<()> {
    let rows: Vec<usize> = (0..outputs.len()).collect();
    let (memory, src_rows) = gather_rows(&enc.hidden, src, &rows)?;
    let full: Vec<Vec<usize>> = outputs
        .iter()
        .map(|t| {
            let mut s = t.tokens.clone();
            if t.finished {
                s.push(EOS);
            }
            s
        })
        .collect();
    // position i predicts output token i, so feed `<s> y_1 … y_{n-1}`
    let inputs: Vec<&[usize]> = full
        .iter()
        .map(|s| &s[..s.len().saturating_sub(1)])
        .collect();
    let tgt = prefixes_batch(&inputs);
    let out = decode_forward(w, &memory, &src_rows, &tgt, dec_recurrences, true)?;
    for (t, trace) in outputs.iter_mut().zip(out.traces.unwrap_or_default()) {
        t.attention = Some(trace);
    }
    Ok(())
}

/// Greedy decoding of a whole batch in lockstep.
pub fn greedy_decode<F: Float>(
    w: &ModelWeights<F>,
    src: &Batch,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    cfg.check_for(w)?;
    let start = Instant::now();
    let enc = encode(w, src, cfg.enc_recurrences, false)?;
    let n = src.batch_size;
    let limits: Vec<usize> = (0..n)
        .map(|r| cfg.max_len(source_tokens(src, r), w.config.max_positions))
        .collect();
    let mut outputs: Vec<Translation> = (0..n)
        .map(|_| Translation {
            tokens: Vec::new(),
            finished: false,
            score: 0.0,
            attention: None,
        })
        .collect();
    let mut live: Vec<usize> = (0..n).collect();
    while !live.is_empty() {
        let prefixes: Vec<&[usize]> = live.iter().map(|&r| outputs[r].tokens.as_slice()).collect();
        let lps = next_log_probs(w, &enc, src, &live, &prefixes, cfg.dec_recurrences)?;
        let mut still = Vec::with_capacity(live.len());
        for (&r, lp) in live.iter().zip(&lps) {
            let tok = argmax(lp);
            let out = &mut outputs[r];
            out.score += lp[tok];
            if tok == EOS {
                out.finished = true;
            } else {
                out.tokens.push(tok);
                if out.tokens.len() < limits[r] {
                    still.push(r);
                }
            }
        }
        live = still;
    }
    for t in &mut outputs {
        t.score /= length_penalty(t.scored_len(), cfg.alpha);
    }
    if cfg.capture_attention && n > 0 {
        capture_attention(w, &enc, src, &mut outputs, cfg.dec_recurrences)?;
    }
    Ok(DecodeOutput {
        translations: outputs,
        elapsed: cfg.timing.then(|| start.elapsed()),
    })
}

/// A scored hypothesis kept by [`beam_search`].
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, including the final `eos` when `finished`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / length_penalty(tokens.len(), alpha)`.
    pub score: f64,
    pub finished: bool,
}

#[derive(Clone, Debug)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Every hypothesis the search finished, in completion order.
    pub pool: Vec<Hypothesis>,
}

/// Higher score first, then the lexicographically smaller sequence.
fn rank(a_score: f64, a: &[usize], b_score: f64, b: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.cmp(b))
}

/// Beam search over an arbitrary next-token distribution.
///
/// `step` receives the live prefixes and returns one log-probability vector
/// per prefix; `-inf` entries are never expanded. The search ends when no
/// live hypothesis can beat the best finished score or at `max_len` tokens,
/// where live hypotheses are finished unterminated.
pub fn beam_search(
    beam_size: usize,
    alpha: f64,
    max_len: usize,
    eos: usize,
    mut step: impl FnMut(&[&[usize]]) -> Result<Vec<Vec<f64>>>,
) -> Result<BeamResult> {
    if beam_size < 1 || max_len < 1 {
        return Err(Error::InvalidArgument(
            "beam_size and max_len must be at least 1".into(),
        ));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut pool: Vec<Hypothesis> = Vec::new();
    let finish = |tokens: Vec<usize>, log_prob: f64, finished: bool| Hypothesis {
        score: log_prob / length_penalty(tokens.len(), alpha),
        tokens,
        log_prob,
        finished,
    };
    for t in 0..max_len {
        let prefixes: Vec<&[usize]> = live.iter().map(|(p, _)| p.as_slice()).collect();
        let lps = step(&prefixes)?;
        if lps.len() != live.len() {
            return Err(Error::InvalidArgument(
                "step returned the wrong number of rows".into(),
            ));
        }
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (i, lp) in lps.iter().enumerate() {
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    cands.push((i, tok, live[i].1 + l));
                }
            }
        }
        let seq = |c: &(usize, usize, f64)| {
            let mut s = live[c.0].0.clone();
            s.push(c.1);
            s
        };
        cands.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(Ordering::Equal)
                .then_with(|| live[a.0].0.cmp(&live[b.0].0).then(a.1.cmp(&b.1)))
        });
        let mut next = Vec::with_capacity(beam_size);
        for (r, c) in cands.iter().enumerate() {
            if c.1 == eos {
                if r < beam_size {
                    pool.push(finish(seq(c), c.2, true));
                }
            } else if next.len() < beam_size {
                next.push((seq(c), c.2));
            }
            if next.len() == beam_size && r + 1 >= beam_size {
                break;
            }
        }
        if t + 1 == max_len {
            pool.extend(next.into_iter().map(|(s, lp)| finish(s, lp, false)));
            break;
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if let Some(best) = pool.iter().map(|h| h.score).reduce(f64::max) {
            let bound = live
                .iter()
                .map(|(_, lp)| lp / length_penalty(max_len, alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            if bound <= best {
                break;
            }
        }
    }
    let best = pool
        .iter()
        .min_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens))
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("search produced no hypothesis".into()))?;
    Ok(BeamResult { best, pool })
}

/// Beam search for each sentence of the batch; the encoder runs once.
pub fn beam_decode<F: Float>(
    w: &ModelWeights<F>,
    src: &Batch,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    cfg.check_for(w)?;
    let start = Instant::now();
    let enc = encode(w, src, cfg.enc_recurrences, false)?;
    let mut outputs = Vec::with_capacity(src.batch_size);
    for r in 0..src.batch_size {
        let max_len = cfg.max_len(source_tokens(src, r), w.config.max_positions);
        let result = beam_search(cfg.beam_size, cfg.alpha, max_len, EOS, |prefixes| {
            next_log_probs(
                w,
                &enc,
                src,
                &vec![r; prefixes.len()],
                prefixes,
                cfg.dec_recurrences,
            )
        })?;
        let mut tokens = result.best.tokens;
        if result.best.finished {
            tokens.pop();
        }
        outputs.push(Translation {
            tokens,
            finished: result.best.finished,
            score: result.best.score,
            attention: None,
        });
    }
    if cfg.capture_attention && !outputs.is_empty() {
        capture_attention(w, &enc, src, &mut outputs, cfg.dec_recurrences)?;
    }
    Ok(DecodeOutput {
        translations: outputs,
        elapsed: cfg.timing.then(|| start.elapsed()),
    })
}

/// Greedy when `beam_size == 1` and `alpha == 0`, beam search otherwise.
pub fn decode<F: Float>(
    w: &ModelWeights<F>,
    src: &Batch,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    if cfg.beam_size == 1 && cfg.alpha == 0.0 {
        greedy_decode(w, src, cfg)
    } else {
        beam_decode(w, src, cfg)
    }
}

/// Log-probability of `tokens` followed by `</s>` (when `finished`) under
/// teacher forcing, divided by the length penalty.
pub fn rescore<F: Float>(
    w: &ModelWeights<F>,
    src: &Batch,
    row: usize,
    t: &Translation,
    cfg: &DecodeConfig,
) -> Result<f64> {
    let enc = encode(w, src, cfg.enc_recurrences, false)?;
    let mut full = t.tokens.clone();
    if t.finished {
        full.push(EOS);
    }
    let mut total = 0.0;
    for i in 0..full.len() {
        let lp = next_log_probs(w, &enc, src, &[row], &[&full[..i]], cfg.dec_recurrences)?;
        total += lp[0][full[i]];
    }
    Ok(total / length_penalty(full.len(), cfg.alpha))
}

/// Sentences per decode batch in [`translate`].
const CHUNK: usize = 64;

/// Translates tokenized sentences, preserving input order.
pub fn translate<F: Float>(
    w: &ModelWeights<F>,
    src_vocab: &Vocabulary,
    sentences: &[String],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    let start = Instant::now();
    let encoded: Vec<Vec<usize>> = sentences.iter().map(|s| src_vocab.encode(s)).collect();
    // length-sorted chunks waste less padding
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.sort_by_key(|&i| (encoded[i].len(), i));
    let mut slots: Vec<Option<Translation>> = vec![None; encoded.len()];
    for chunk in order.chunks(CHUNK) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| encoded[i].clone()).collect();
        let out = decode(w, &Batch::from_sequences(&seqs), cfg)?;
        for (&i, t) in chunk.iter().zip(out.translations) {
            slots[i] = Some(t);
        }
    }
    Ok(DecodeOutput {
        translations: slots
            .into_iter()
            .map(|t| t.expect("every slot filled"))
            .collect(),
        elapsed: cfg.timing.then(|| start.elapsed()),
    })
}

/// Translations rendered as text with the target vocabulary.
pub fn render(tgt_vocab: &Vocabulary, translations: &[Translation]) -> Vec<String> {
    translations
        .iter()
        .map(|t| tgt_vocab.decode(&t.tokens))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dec_recurrences: usize,
    pub bleu: f64,
    pub seconds: f64,
}

/// Decodes the test set once per decoder depth in `range`, encoder depth fixed.
pub fn recurrence_sweep<F: Float>(
    w: &ModelWeights<F>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    sources: &[String],
    references: &[String],
    range: std::ops::RangeInclusive<usize>,
    cfg: &DecodeConfig,
) -> Result<Vec<SweepRow>> {
    if !w.config.stacking.is_recurrent() {
        return Err(Error::Config(
            "recurrence sweep needs a recurrent model".into(),
        ));
    }
    if *range.start() < 1 || range.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep range must be a non-empty range starting at 1 or more".into(),
        ));
    }
    range
        .map(|k| {
            let c = DecodeConfig {
                dec_recurrences: Some(k),
                enc_recurrences: None,
                ..cfg.clone()
            };
            let start = Instant::now();
            let out = translate(w, src_vocab, sources, &c)?;
            let seconds = start.elapsed().as_secs_f64();
            let hyps = render(tgt_vocab, &out.translations);
            Ok(SweepRow {
                dec_recurrences: k,
                bleu: bleu(&hyps, references, 4, false)?.bleu,
                seconds,
            })
        })
        .collect()
}
