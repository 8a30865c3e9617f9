//! Corpus files, word-level vocabularies and padded batches.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token ↔ id mapping with the reserved ids fixed at 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the most frequent tokens, ties broken lexicographically, so the
    /// vocabulary (reserved ids included) has at most `max_size` entries.
    pub fn build<S: AsRef<str>>(sentences: &[S], max_size: usize) -> Result<Self> {
        if max_size <= RESERVED.len() {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size must exceed {}, got {max_size}",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for tok in s.as_ref().split_whitespace() {
                if !RESERVED.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());
        Ok(Self::from_tokens(
            ranked.into_iter().map(|(t, _)| t.to_string()),
        ))
    }

    /// Reserved entries followed by `tokens` in order; duplicates dropped.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()).chain(tokens) {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokens to ids wrapped in `<s> … </s>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(text.split_whitespace().map(|t| self.id(t)));
        ids.push(EOS);
        ids
    }

    /// Ids back to text, dropping pad/bos/eos. Unknown ids render as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Format(format!(
                "{}: vocabulary must start with {RESERVED:?}",
                path.display()
            )));
        }
        let v = Self::from_tokens(lines[RESERVED.len()..].iter().map(|s| s.to_string()));
        if v.len() != lines.len() {
            return Err(Error::Format(format!(
                "{}: duplicate tokens",
                path.display()
            )));
        }
        Ok(v)
    }
}

/// Line-aligned source/target sentences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(String, String)>,
}

impl ParallelCorpus {
    /// Pairs whose either side is blank are dropped.
    pub fn new(pairs: Vec<(String, String)>) -> Self {
        ParallelCorpus {
            pairs: pairs
                .into_iter()
                .filter(|(s, t)| !s.trim().is_empty() && !t.trim().is_empty())
                .collect(),
        }
    }

    pub fn from_sides(sources: Vec<String>, targets: Vec<String>) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "parallel sides differ in length: {} vs {}",
                sources.len(),
                targets.len()
            )));
        }
        Ok(Self::new(sources.into_iter().zip(targets).collect()))
    }

    pub fn load(src: &Path, tgt: &Path) -> Result<Self> {
        Self::from_sides(read_lines(src)?, read_lines(tgt)?)
    }

    pub fn save(&self, src: &Path, tgt: &Path) -> Result<()> {
        write_lines(src, self.pairs.iter().map(|p| p.0.as_str()))?;
        write_lines(tgt, self.pairs.iter().map(|p| p.1.as_str()))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.0.clone()).collect()
    }

    pub fn targets(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.1.clone()).collect()
    }

    /// Uniform sample without replacement of ⌈fraction·n⌉ pairs, kept in
    /// corpus order.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "fraction must be in (0, 1], got {fraction}"
            )));
        }
        let n = self.pairs.len();
        let keep = ((fraction * n as f64).ceil() as usize).min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut chosen = idx[..keep].to_vec();
        chosen.sort_unstable();
        Ok(ParallelCorpus {
            pairs: chosen.into_iter().map(|i| self.pairs[i].clone()).collect(),
        })
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect())
}

pub fn write_lines<'s>(path: &Path, lines: impl IntoIterator<Item = &'s str>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Row-major `[batch × max_len]` id matrix padded with [`PAD`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub batch_size: usize,
    pub max_len: usize,
}

impl Batch {
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Self {
        let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD; seqs.len() * max_len];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * max_len..r * max_len + s.len()].copy_from_slice(s);
        }
        let mask = ids.iter().map(|&i| i != PAD).collect();
        Batch {
            ids,
            mask,
            lengths: seqs.iter().map(Vec::len).collect(),
            batch_size: seqs.len(),
            max_len,
        }
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.max_len..r * self.max_len + self.lengths[r]]
    }

    pub fn num_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// A training batch: encoded sources and full `<s> … </s>` targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPair {
    pub src: Batch,
    pub tgt: Batch,
    /// Corpus indices of the rows.
    pub indices: Vec<usize>,
}

impl BatchPair {
    /// Teacher-forcing split: decoder input drops the final token, the
    /// prediction target drops `<s>`.
    pub fn teacher_forcing(&self) -> (Batch, Vec<usize>) {
        let inputs: Vec<Vec<usize>> = (0..self.tgt.batch_size)
            .map(|r| {
                let row = self.tgt.row(r);
                row[..row.len() - 1].to_vec()
            })
            .collect();
        let input = Batch::from_sequences(&inputs);
        let mut targets = vec![PAD; input.batch_size * input.max_len];
        for r in 0..self.tgt.batch_size {
            let row = &self.tgt.row(r)[1..];
            targets[r * input.max_len..r * input.max_len + row.len()].copy_from_slice(row);
        }
        (input, targets)
    }
}

/// Encodes a corpus once for batching.
#[derive(Clone, Debug)]
pub struct EncodedCorpus {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl EncodedCorpus {
    pub fn new(corpus: &ParallelCorpus, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Self {
        EncodedCorpus {
            src: corpus
                .pairs
                .iter()
                .map(|p| src_vocab.encode(&p.0))
                .collect(),
            tgt: corpus
                .pairs
                .iter()
                .map(|p| tgt_vocab.encode(&p.1))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Length-bucketed, seed-shuffled batches covering every pair exactly once.
///
/// Pairs are sorted by length (shuffled first so equal lengths mix), packed
/// while `rows × longest ≤ batch_size_tokens`, and the batch order is then
/// shuffled.
pub fn make_batches(
    corpus: &EncodedCorpus,
    batch_size_tokens: usize,
    max_positions: usize,
    seed: u64,
) -> Result<Vec<BatchPair>> {
    let width = |i: usize| corpus.src[i].len().max(corpus.tgt[i].len());
    for i in 0..corpus.len() {
        let len = width(i);
        if len > max_positions {
            return Err(Error::SentenceTooLong {
                index: i,
                len,
                max: max_positions,
            });
        }
        if len > batch_size_tokens {
            return Err(Error::InvalidArgument(format!(
                "batch budget {batch_size_tokens} is smaller than sentence {i} ({len} tokens)"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| width(i));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let w = width(i).max(longest);
        if !current.is_empty() && w * (current.len() + 1) > batch_size_tokens {
            groups.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(width(i));
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut rng);
    Ok(groups
        .into_iter()
        .map(|idx| BatchPair {
            src: Batch::from_sequences(
                &idx.iter()
                    .map(|&i| corpus.src[i].clone())
                    .collect::<Vec<_>>(),
            ),
            tgt: Batch::from_sequences(
                &idx.iter()
                    .map(|&i| corpus.tgt[i].clone())
                    .collect::<Vec<_>>(),
            ),
            indices: idx,
        })
        .collect())
}
