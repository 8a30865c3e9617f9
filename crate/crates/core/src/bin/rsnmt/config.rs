//! Layered configuration: built-in defaults, then a JSON file, then flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rsnmt::data::Vocabulary;
use rsnmt::decoding::DecodeConfig;
use rsnmt::model::{ModelConfig, ModelWeights, StackingMode};
use rsnmt::training::Checkpoint;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::args::{DecodeFlags, ModelFlags};

/// Invalid invocation; reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Sections of a JSON config file; every section and field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub model: Map<String, Value>,
    #[serde(default)]
    pub train: Map<String, Value>,
    #[serde(default)]
    pub data: Map<String, Value>,
    #[serde(default)]
    pub decode: Map<String, Value>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }
}

/// Values set later win.
#[derive(Default)]
pub struct Layers(Map<String, Value>);

impl Layers {
    pub fn new(base: Value) -> Self {
        match base {
            Value::Object(m) => Layers(m),
            _ => Layers::default(),
        }
    }

    pub fn overlay(&mut self, top: &Map<String, Value>) -> &mut Self {
        for (k, v) in top {
            self.0.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn set(&mut self, key: &str, value: Option<impl Serialize>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(
                key.to_string(),
                serde_json::to_value(v).expect("plain value"),
            );
        }
        self
    }

    pub fn resolve<T: DeserializeOwned>(&self, what: &str) -> Result<T> {
        serde_json::from_value(Value::Object(self.0.clone()))
            .map_err(|e| usage(format!("{what} config: {e}")))
    }
}

/// Defaults for a model whose vocabulary sizes are filled in from data.
pub fn model_defaults() -> Value {
    json!({
        "d_model": 512,
        "d_ff": 2048,
        "n_heads": 8,
        "stacking": StackingMode::recurrent(6),
        "src_vocab_size": 0,
        "tgt_vocab_size": 0,
    })
}

pub fn apply_model_flags(layers: &mut Layers, f: &ModelFlags) {
    let stacking = match (f.recurrences, f.layers) {
        (Some(k), _) => Some(StackingMode::recurrent(k)),
        (None, Some(n)) => Some(StackingMode::vanilla(n)),
        (None, None) => None,
    };
    layers
        .set("d_model", f.d_model)
        .set("d_ff", f.d_ff)
        .set("n_heads", f.heads)
        .set("stacking", stacking)
        .set("share_src_tgt_embedding", f.share_embeddings)
        .set("tie_output_projection", f.tie_output)
        .set("dropout", f.dropout)
        .set("max_positions", f.max_positions);
}

pub fn resolve_decode(file: &FileConfig, f: &DecodeFlags) -> Result<DecodeConfig> {
    let mut layers = Layers::new(serde_json::to_value(DecodeConfig::default())?);
    layers.overlay(&file.decode);
    if f.greedy {
        layers.set("beam_size", Some(1)).set("alpha", Some(0.0));
    }
    layers
        .set("beam_size", f.beam)
        .set("alpha", f.alpha)
        .set("max_len_a", f.max_len_a)
        .set("max_len_b", f.max_len_b);
    let cfg: DecodeConfig = layers.resolve("decode")?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

pub fn validate_model(cfg: &ModelConfig) -> Result<()> {
    cfg.validate().map_err(|e| usage(e.to_string()))
}

/// A trained model with its vocabularies.
pub struct LoadedModel {
    pub weights: ModelWeights<f32>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub path: PathBuf,
}

/// Accepts a run directory (uses `model.rsnmt`) or a checkpoint file; the
/// vocabularies are looked up next to it or one directory up.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let file = if path.is_dir() {
        path.join("model.rsnmt")
    } else {
        path.to_path_buf()
    };
    let checkpoint =
        Checkpoint::load(&file).with_context(|| format!("loading {}", file.display()))?;
    let weights = checkpoint.to_weights::<f32>()?;
    let dir = file.parent().unwrap_or(Path::new("."));
    let vocab_dir = [dir, dir.parent().unwrap_or(dir)]
        .into_iter()
        .find(|d| d.join("vocab.src").is_file())
        .with_context(|| format!("no vocab.src next to {}", file.display()))?;
    let src_vocab = Vocabulary::load(&vocab_dir.join("vocab.src"))?;
    let tgt_vocab = Vocabulary::load(&vocab_dir.join("vocab.tgt"))?;
    if src_vocab.len() != weights.config.src_vocab_size
        || tgt_vocab.len() != weights.config.tgt_vocab_size
    {
        anyhow::bail!(
            "vocabulary sizes ({}, {}) do not match the model ({}, {})",
            src_vocab.len(),
            tgt_vocab.len(),
            weights.config.src_vocab_size,
            weights.config.tgt_vocab_size
        );
    }
    Ok(LoadedModel {
        weights,
        src_vocab,
        tgt_vocab,
        path: file,
    })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

/// `a..b` (inclusive) or a single number.
pub fn parse_range(s: &str) -> Result<std::ops::RangeInclusive<usize>> {
    let bad = || usage(format!("bad range {s:?}; expected e.g. 1..8"));
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a, b.trim_start_matches('=')),
        None => (s, s),
    };
    let (a, b): (usize, usize) = (
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    );
    if a == 0 || a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("1..8").unwrap(), 1..=8);
        assert_eq!(parse_range("2..=3").unwrap(), 2..=3);
        assert_eq!(parse_range("4").unwrap(), 4..=4);
        assert!(parse_range("0..3").is_err());
        assert!(parse_range("5..2").is_err());
        assert!(parse_range("x").is_err());
    }

    #[test]
    fn flags_override_file() {
        let file = FileConfig {
            decode: serde_json::from_str(r#"{"beam_size": 8, "alpha": 1.0}"#).unwrap(),
            ..FileConfig::default()
        };
        let flags = DecodeFlags {
            beam: Some(2),
            ..DecodeFlags::default()
        };
        let cfg = resolve_decode(&file, &flags).unwrap();
        assert_eq!((cfg.beam_size, cfg.alpha), (2, 1.0));
        let greedy = DecodeFlags {
            greedy: true,
            ..DecodeFlags::default()
        };
        let cfg = resolve_decode(&file, &greedy).unwrap();
        assert_eq!((cfg.beam_size, cfg.alpha), (1, 0.0));
    }
}
