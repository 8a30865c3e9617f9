use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corpus-level BLEU with its components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// 0–100.
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Sufficient statistics of one sentence pair.
#[derive(Clone, Debug, Default)]
struct Stats {
    matches: Vec<usize>,
    totals: Vec<usize>,
    hyp_len: usize,
    ref_len: usize,
}

impl Stats {
    fn new(order: usize) -> Self {
        Stats {
            matches: vec![0; order],
            totals: vec![0; order],
            hyp_len: 0,
            ref_len: 0,
        }
    }

    fn add(&mut self, other: &Stats) {
        for n in 0..self.matches.len() {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    fn report(&self) -> EvalReport {
        let precisions: Vec<f64> = self
            .matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
            .collect();
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let brevity_penalty = if self.hyp_len == 0 {
            0.0
        } else {
            (1.0 - r / c).min(0.0).exp()
        };
        let bleu = if precisions.contains(&0.0) {
            0.0
        } else {
            let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64;
            100.0 * brevity_penalty * log_mean.exp()
        };
        EvalReport {
            bleu,
            precisions,
            brevity_penalty,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
        }
    }
}

fn ngram_counts<'s, 't>(tokens: &'s [&'t str], n: usize) -> HashMap<&'s [&'t str], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

fn sentence_stats(hyp: &str, reference: &str, max_order: usize, lowercase: bool) -> Stats {
    let (hyp, reference) = if lowercase {
        (hyp.to_lowercase(), reference.to_lowercase())
    } else {
        (hyp.to_string(), reference.to_string())
    };
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let mut s = Stats::new(max_order);
    s.hyp_len = h.len();
    s.ref_len = r.len();
    for n in 1..=max_order {
        let hc = ngram_counts(&h, n);
        let rc = ngram_counts(&r, n);
        s.totals[n - 1] = h.len().saturating_sub(n - 1);
        s.matches[n - 1] = hc
            .iter()
            .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
    }
    s
}

fn corpus_stats<S: AsRef<str>>(
    hyps: &[S],
    refs: &[S],
    max_order: usize,
    lowercase: bool,
) -> Result<Vec<Stats>> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if max_order == 0 {
        return Err(Error::InvalidArgument(
            "max_order must be at least 1".into(),
        ));
    }
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| sentence_stats(h.as_ref(), r.as_ref(), max_order, lowercase))
        .collect())
}

/// Corpus BLEU over whitespace-tokenized text, uniform weights, no smoothing.
pub fn bleu<S: AsRef<str>>(
    hyps: &[S],
    refs: &[S],
    max_order: usize,
    lowercase: bool,
) -> Result<EvalReport> {
    let stats = corpus_stats(hyps, refs, max_order, lowercase)?;
    let mut total = Stats::new(max_order);
    stats.iter().for_each(|s| total.add(s));
    Ok(total.report())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Better {
    A,
    B,
    Tie,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub better: Better,
    /// Fraction of resamples (ties split evenly) on which the leading
    /// system did not win.
    pub p_value: f64,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    pub resamples: usize,
}

/// Paired bootstrap resampling of sentence indices.
pub fn bootstrap_significance<S: AsRef<str>>(
    hyp_a: &[S],
    hyp_b: &[S],
    refs: &[S],
    resamples: usize,
    p: f64,
    seed: u64,
) -> Result<Significance> {
    if hyp_b.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses vs {} references",
            hyp_b.len(),
            refs.len()
        )));
    }
    if refs.is_empty() || resamples == 0 {
        return Err(Error::InvalidArgument(
            "need at least one sentence and one resample".into(),
        ));
    }
    let sa = corpus_stats(hyp_a, refs, 4, false)?;
    let sb = corpus_stats(hyp_b, refs, 4, false)?;
    let n = refs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut wins_a, mut wins_b, mut ties) = (0, 0, 0);
    for _ in 0..resamples {
        let (mut ta, mut tb) = (Stats::new(4), Stats::new(4));
        for _ in 0..n {
            let i = rng.random_range(0..n);
            ta.add(&sa[i]);
            tb.add(&sb[i]);
        }
        let (ba, bb) = (ta.report().bleu, tb.report().bleu);
        if ba > bb {
            wins_a += 1;
        } else if bb > ba {
            wins_b += 1;
        } else {
            ties += 1;
        }
    }
    let frac_a = (wins_a as f64 + 0.5 * ties as f64) / resamples as f64;
    let (leader, p_value) = if frac_a >= 0.5 {
        (Better::A, 1.0 - frac_a)
    } else {
        (Better::B, frac_a)
    };
    let better = if p_value < p { leader } else { Better::Tie };
    Ok(Significance {
        better,
        p_value,
        wins_a,
        wins_b,
        ties,
        resamples,
    })
}
