//! Synthetic parallel corpora for smoke tests and small experiments.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ParallelCorpus;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyTask {
    /// Target equals source.
    Copy,
    /// Target is the source in reverse order.
    Reversal,
    /// Each source word maps to a fixed target word, order kept.
    Lexicon,
}

impl FromStr for ToyTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(ToyTask::Copy),
            "reversal" | "reverse" => Ok(ToyTask::Reversal),
            "lexicon" => Ok(ToyTask::Lexicon),
            other => Err(Error::InvalidArgument(format!(
                "unknown toy task {other:?} (copy, reversal, lexicon)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub task: ToyTask,
    pub pairs: usize,
    /// Distinct words per language.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Probability that a training target word is replaced by a random word.
    #[serde(default)]
    pub noise: f64,
}

/// Source word `i` is `s{i}`; target words are `t{j}`.
pub fn generate(spec: &ToySpec) -> Result<ParallelCorpus> {
    generate_with(spec, spec.seed, 0)
}

/// The lexicon comes from `lexicon_seed`; `stream` selects an independent
/// sentence sample.
fn generate_with(spec: &ToySpec, lexicon_seed: u64, stream: u64) -> Result<ParallelCorpus> {
    if spec.vocab_size == 0 || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::InvalidArgument(
            "toy corpus needs vocab_size ≥ 1 and 1 ≤ min_len ≤ max_len".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::InvalidArgument("noise must be in [0, 1]".into()));
    }
    let mut lexicon: Vec<usize> = (0..spec.vocab_size).collect();
    lexicon.shuffle(&mut ChaCha8Rng::seed_from_u64(lexicon_seed));
    let mut rng = ChaCha8Rng::seed_from_u64(lexicon_seed);
    rng.set_stream(stream + 1);
    let pairs = (0..spec.pairs)
        .map(|_| {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let words: Vec<usize> = (0..len)
                .map(|_| rng.random_range(0..spec.vocab_size))
                .collect();
            let mut target: Vec<usize> = match spec.task {
                ToyTask::Copy => words.clone(),
                ToyTask::Reversal => words.iter().rev().copied().collect(),
                ToyTask::Lexicon => words.iter().map(|&w| lexicon[w]).collect(),
            };
            if spec.noise > 0.0 {
                for t in &mut target {
                    if rng.random_bool(spec.noise) {
                        *t = rng.random_range(0..spec.vocab_size);
                    }
                }
            }
            let tgt_prefix = if spec.task == ToyTask::Lexicon {
                "t"
            } else {
                "s"
            };
            (join("s", &words), join(tgt_prefix, &target))
        })
        .collect();
    Ok(ParallelCorpus { pairs })
}

/// A training corpus of `spec.pairs` pairs and a test set of `test_pairs`
/// pairs from the same lexicon, with no test source occurring in training.
/// Noise applies to the training split only.
pub fn generate_split(
    spec: &ToySpec,
    test_pairs: usize,
) -> Result<(ParallelCorpus, ParallelCorpus)> {
    let train = generate(spec)?;
    let seen: std::collections::HashSet<&str> = train.pairs.iter().map(|p| p.0.as_str()).collect();
    let mut test = Vec::with_capacity(test_pairs);
    let mut round = 0u64;
    while test.len() < test_pairs {
        round += 1;
        if round > 64 {
            return Err(Error::InvalidArgument(
                "cannot find enough unseen test sentences; widen vocab or lengths".into(),
            ));
        }
        let extra = ToySpec {
            pairs: test_pairs.max(16),
            noise: 0.0,
            ..spec.clone()
        };
        let fresh = generate_with(&extra, spec.seed, round)?;
        for p in fresh.pairs {
            if test.len() < test_pairs && !seen.contains(p.0.as_str()) && !test.contains(&p) {
                test.push(p);
            }
        }
    }
    Ok((train, ParallelCorpus { pairs: test }))
}

fn join(prefix: &str, ids: &[usize]) -> String {
    ids.iter()
        .map(|i| format!("{prefix}{i}"))
        .collect::<Vec<_>>()
        .join(" ")
}
