//! Layer-transfer initialization, sequence-level distillation and
//! back-translation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::bleu;
use crate::data::{ParallelCorpus, Vocabulary};
use crate::decoding::{render, translate, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, ModelWeights};
use crate::tensor::Float;

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    /// 1-based teacher encoder layer.
    pub l_enc: usize,
    /// 1-based teacher decoder layer.
    pub l_dec: usize,
    #[serde(default = "yes")]
    pub copy_embeddings: bool,
    #[serde(default = "yes")]
    pub copy_output_projection: bool,
}

impl TransferConfig {
    pub fn new(l_enc: usize, l_dec: usize) -> Self {
        TransferConfig {
            l_enc,
            l_dec,
            copy_embeddings: true,
            copy_output_projection: true,
        }
    }
}

/// Builds a recurrent student whose shared layers are copies of teacher
/// layers `l_enc` / `l_dec`. Parts without a teacher counterpart keep their
/// fresh initialization from `seed`.
pub fn init_from_teacher<F: Float>(
    student: &ModelConfig,
    teacher: &ModelWeights<F>,
    t: &TransferConfig,
    seed: u64,
) -> Result<ModelWeights<F>> {
    let tc = &teacher.config;
    if !student.stacking.is_recurrent() {
        return Err(Error::Config(
            "layer transfer needs a recurrent student".into(),
        ));
    }
    if tc.stacking.is_recurrent() {
        return Err(Error::Config(
            "layer transfer needs a vanilla teacher".into(),
        ));
    }
    if (student.d_model, student.d_ff, student.n_heads) != (tc.d_model, tc.d_ff, tc.n_heads)
        || (student.src_vocab_size, student.tgt_vocab_size)
            != (tc.src_vocab_size, tc.tgt_vocab_size)
    {
        return Err(Error::Config(format!(
            "student widths/vocabularies ({}, {}, {}, {}, {}) differ from teacher ({}, {}, {}, {}, {})",
            student.d_model,
            student.d_ff,
            student.n_heads,
            student.src_vocab_size,
            student.tgt_vocab_size,
            tc.d_model,
            tc.d_ff,
            tc.n_heads,
            tc.src_vocab_size,
            tc.tgt_vocab_size
        )));
    }
    let (n, m) = (teacher.encoder_layers.len(), teacher.decoder_layers.len());
    if !(1..=n).contains(&t.l_enc) {
        return Err(Error::InvalidArgument(format!(
            "l_enc {} outside 1..={n}",
            t.l_enc
        )));
    }
    if !(1..=m).contains(&t.l_dec) {
        return Err(Error::InvalidArgument(format!(
            "l_dec {} outside 1..={m}",
            t.l_dec
        )));
    }
    let mut w = build_model::<F>(student, seed)?;
    w.encoder_layers[0] = teacher.encoder_layers[t.l_enc - 1].clone();
    w.decoder_layers[0] = teacher.decoder_layers[t.l_dec - 1].clone();
    if t.copy_embeddings {
        w.src_embedding = teacher.src_embedding.clone();
        if let Some(dst) = w.tgt_embedding.as_mut() {
            if let Some(src) = &teacher.tgt_embedding {
                *dst = src.clone();
            }
        }
    }
    if t.copy_output_projection {
        if let (Some(dst), Some(src)) = (w.output_projection.as_mut(), &teacher.output_projection) {
            *dst = src.clone();
        }
    }
    Ok(w)
}

fn default_sample() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    #[serde(default)]
    pub decode: DecodeConfig,
    /// Whether pseudo pairs are appended to the original corpus.
    #[serde(default)]
    pub mix_original: bool,
    /// Pairs sampled for the similarity BLEU.
    #[serde(default = "default_sample")]
    pub sample_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            decode: DecodeConfig::default(),
            mix_original: false,
            sample_size: default_sample(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub index: usize,
    pub reason: String,
}

/// Sidecar report of a generation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub inputs: usize,
    pub produced: usize,
    pub skipped: Vec<Skip>,
    pub sample_size: usize,
    /// BLEU of sampled generated sentences against their originals.
    pub sample_bleu: Option<f64>,
    pub seed: u64,
}

impl DistillReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Sentences per decode call; a failing chunk is retried line by line.
const CHUNK: usize = 256;

/// Translates every input, recording failures instead of aborting.
fn generate<F: Float>(
    model: &ModelWeights<F>,
    in_vocab: &Vocabulary,
    out_vocab: &Vocabulary,
    inputs: &[String],
    cfg: &DecodeConfig,
) -> Result<(Vec<Option<String>>, Vec<Skip>)> {
    cfg.validate()?;
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut skipped = Vec::new();
    for (c, chunk) in inputs.chunks(CHUNK).enumerate() {
        match translate(model, in_vocab, chunk, cfg) {
            Ok(out) => outputs.extend(render(out_vocab, &out.translations).into_iter().map(Some)),
            Err(_) => {
                for (i, s) in chunk.iter().enumerate() {
                    match translate(model, in_vocab, std::slice::from_ref(s), cfg) {
                        Ok(out) => {
                            outputs.push(Some(render(out_vocab, &out.translations).remove(0)))
                        }
                        Err(e) => {
                            skipped.push(Skip {
                                index: c * CHUNK + i,
                                reason: e.to_string(),
                            });
                            outputs.push(None);
                        }
                    }
                }
            }
        }
    }
    Ok((outputs, skipped))
}

fn sample_bleu(hyps: &[String], refs: &[String], size: usize, seed: u64) -> Result<Option<f64>> {
    if hyps.is_empty() || size == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..hyps.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(size);
    idx.sort_unstable();
    let h: Vec<&str> = idx.iter().map(|&i| hyps[i].as_str()).collect();
    let r: Vec<&str> = idx.iter().map(|&i| refs[i].as_str()).collect();
    Ok(Some(bleu(&h, &r, 4, false)?.bleu))
}

/// Replaces each target with the teacher's translation of its source.
///
/// With `mix_original` the original pairs come first, then the distilled ones.
pub fn distill_corpus<F: Float>(
    teacher: &ModelWeights<F>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    corpus: &ParallelCorpus,
    cfg: &DistillConfig,
) -> Result<(ParallelCorpus, DistillReport)> {
    let sources = corpus.sources();
    let (outputs, skipped) = generate(teacher, src_vocab, tgt_vocab, &sources, &cfg.decode)?;
    let mut pairs = Vec::new();
    let (mut hyps, mut refs) = (Vec::new(), Vec::new());
    for ((src, reference), out) in corpus.pairs.iter().zip(outputs) {
        if let Some(hyp) = out {
            hyps.push(hyp.clone());
            refs.push(reference.clone());
            pairs.push((src.clone(), hyp));
        }
    }
    let report = DistillReport {
        inputs: sources.len(),
        produced: pairs.len(),
        skipped,
        sample_size: cfg.sample_size.min(hyps.len()),
        sample_bleu: sample_bleu(&hyps, &refs, cfg.sample_size, cfg.seed)?,
        seed: cfg.seed,
    };
    let pairs = if cfg.mix_original {
        corpus.pairs.iter().cloned().chain(pairs).collect()
    } else {
        pairs
    };
    Ok((ParallelCorpus { pairs }, report))
}

/// Pairs each target-side monolingual sentence with its reverse-model
/// translation (pseudo source, original sentence).
///
/// `reverse` translates target language into source language, so
/// `reverse_src_vocab` is a target-language vocabulary.
pub fn back_translate<F: Float>(
    reverse: &ModelWeights<F>,
    reverse_src_vocab: &Vocabulary,
    reverse_tgt_vocab: &Vocabulary,
    monolingual: &[String],
    cfg: &DistillConfig,
    original: &ParallelCorpus,
) -> Result<(ParallelCorpus, DistillReport)> {
    let (outputs, skipped) = generate(
        reverse,
        reverse_src_vocab,
        reverse_tgt_vocab,
        monolingual,
        &cfg.decode,
    )?;
    let pseudo: Vec<(String, String)> = monolingual
        .iter()
        .zip(outputs)
        .filter_map(|(m, out)| out.map(|src| (src, m.clone())))
        .collect();
    let report = DistillReport {
        inputs: monolingual.len(),
        produced: pseudo.len(),
        skipped,
        sample_size: 0,
        sample_bleu: None,
        seed: cfg.seed,
    };
    let pairs = if cfg.mix_original {
        original.pairs.iter().cloned().chain(pseudo).collect()
    } else {
        pseudo
    };
    Ok((ParallelCorpus { pairs }, report))
}
