//! Binary checkpoint format.
//!
//! Layout: the 6 magic bytes `RSNMT1`, a little-endian `u32` header length,
//! a UTF-8 JSON header (config, step, precision, provenance and an array
//! manifest of name/shape/byte offset), then the raw little-endian arrays
//! concatenated in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_shapes, ModelConfig, ModelWeights};
use crate::tensor::{sinusoidal_positions, Float, Tensor};

pub const MAGIC: &[u8; 6] = b"RSNMT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn of<F: Float>() -> Self {
        if F::NAME == "f64" {
            Precision::F64
        } else {
            Precision::F32
        }
    }
}

/// Lineage of a model trained through layer transfer or distillation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_teacher: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_enc: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_dec: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distilled_from: Option<String>,
    #[serde(default)]
    pub back_translated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub averaged_from: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    precision: Precision,
    #[serde(default)]
    provenance: Provenance,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub precision: Precision,
    pub provenance: Provenance,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_weights<F: Float>(w: &ModelWeights<F>, step: u64) -> Self {
        let mut arrays = Vec::new();
        w.visit(|name, t| {
            arrays.push(NamedArray {
                name,
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64()).collect(),
            })
        });
        Checkpoint {
            config: w.config.clone(),
            step,
            precision: Precision::of::<F>(),
            provenance: Provenance::default(),
            arrays,
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Checks names and shapes against the manifest implied by the config.
    pub fn check_manifest(&self) -> Result<()> {
        self.config.validate()?;
        let expected = build_shapes(&self.config);
        if expected.len() != self.arrays.len() {
            return Err(Error::Structure(format!(
                "config implies {} arrays, checkpoint has {}",
                expected.len(),
                self.arrays.len()
            )));
        }
        for ((name, shape), a) in expected.iter().zip(&self.arrays) {
            if *name != a.name || *shape != a.shape {
                return Err(Error::Structure(format!(
                    "array {}: expected {name} {shape:?}, found {} {:?}",
                    a.name, a.name, a.shape
                )));
            }
            if a.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Structure(format!(
                    "array {}: wrong element count",
                    a.name
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds weights in precision `F` from the checkpoint's own config.
    pub fn to_weights<F: Float>(&self) -> Result<ModelWeights<F>> {
        self.check_manifest()?;
        let c = &self.config;
        let mut arrays = self.arrays.iter();
        let mut take = || -> Result<Tensor<F>> {
            let a = arrays.next().expect("manifest checked");
            Ok(
                Tensor::new(a.shape.clone(), a.data.iter().map(|&v| F::of(v)).collect())?
                    .with_requires_grad(true),
            )
        };
        // Rebuild structure from a zero-cost skeleton and fill in order.
        let mut w = crate::model::build_model::<F>(c, 0)?;
        let mut failure = None;
        w.visit_mut(|_, t| match take() {
            Ok(v) => *t = v,
            Err(e) => failure = Some(e),
        });
        if let Some(e) = failure {
            return Err(e);
        }
        w.positions = sinusoidal_positions(c.max_positions, c.d_model);
        Ok(w)
    }

    /// Like [`Checkpoint::to_weights`], but insists the stored structure
    /// matches `expected`.
    pub fn to_weights_for<F: Float>(&self, expected: &ModelConfig) -> Result<ModelWeights<F>> {
        if self.config.stacking != expected.stacking || !self.config.same_shape_as(expected) {
            return Err(Error::Structure(format!(
                "checkpoint holds {:?} (d_model {}), requested {:?} (d_model {})",
                self.config.stacking, self.config.d_model, expected.stacking, expected.d_model
            )));
        }
        self.to_weights()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let width = self.precision.bytes();
        let mut offset = 0;
        let arrays = self
            .arrays
            .iter()
            .map(|a| {
                let e = ArrayEntry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    offset,
                };
                offset += a.data.len() * width;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            precision: self.precision,
            provenance: self.provenance.clone(),
            arrays,
        };
        let json = serde_json::to_vec(&header)?;
        let header_len =
            u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
        let mut out = Vec::with_capacity(10 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            match self.precision {
                Precision::F32 => a
                    .data
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                Precision::F64 => a
                    .data
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..6] != MAGIC {
            return Err(Error::Format("missing RSNMT1 magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let body = 10usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[10..body])
            .map_err(|e| Error::Format(format!("header: {e}")))?;
        let data = &bytes[body..];
        let width = header.precision.bytes();
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut expected_offset = 0;
        for e in &header.arrays {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset {
                return Err(Error::Format(format!(
                    "array {}: offset {} out of order",
                    e.name, e.offset
                )));
            }
            let end = e.offset + n * width;
            let raw = data
                .get(e.offset..end)
                .ok_or_else(|| Error::Format(format!("truncated data for array {}", e.name)))?;
            let values = match header.precision {
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Precision::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            arrays.push(NamedArray {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: values,
            });
            expected_offset = end;
        }
        if expected_offset != data.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after arrays",
                data.len() - expected_offset
            )));
        }
        let ck = Checkpoint {
            config: header.config,
            step: header.step,
            precision: header.precision,
            provenance: header.provenance,
            arrays,
        };
        ck.check_manifest()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Correctly rounded sum (Shewchuk's exact partials), independent of order.
fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // Round the expansion to nearest, as in Python's math.fsum.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

/// Elementwise mean of every weight array; `step` is the maximum input step.
///
/// The per-element sum is exact before the single division, so the result
/// does not depend on input order.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::InvalidArgument("no checkpoints to average".into()))?;
    for ck in &checkpoints[1..] {
        if ck.config != first.config {
            return Err(Error::Structure(
                "checkpoints disagree on model config".into(),
            ));
        }
        if ck.arrays.len() != first.arrays.len() {
            return Err(Error::Structure(
                "checkpoints disagree on array count".into(),
            ));
        }
        for (a, b) in first.arrays.iter().zip(&ck.arrays) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Structure(format!(
                    "array {} {:?} does not match {} {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
    }
    let n = checkpoints.len() as f64;
    let arrays = first
        .arrays
        .iter()
        .enumerate()
        .map(|(k, a)| NamedArray {
            name: a.name.clone(),
            shape: a.shape.clone(),
            data: (0..a.data.len())
                .map(|i| exact_sum(checkpoints.iter().map(|c| c.arrays[k].data[i])) / n)
                .collect(),
        })
        .collect();
    let precision = if checkpoints.iter().all(|c| c.precision == Precision::F64) {
        Precision::F64
    } else {
        Precision::F32
    };
    Ok(Checkpoint {
        config: first.config.clone(),
        step: checkpoints.iter().map(|c| c.step).max().unwrap_or(0),
        precision,
        provenance: Provenance {
            averaged_from: Some(checkpoints.len()),
            ..first.provenance.clone()
        },
        arrays,
    })
}

pub fn average_checkpoint_files(paths: &[PathBuf]) -> Result<Checkpoint> {
    let cks = paths
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    average_checkpoints(&cks)
}

/// Checkpoint files in `dir` named `ckpt-<step>.rsnmt`, ordered by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: BTreeMap<u64, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt-"))
            .and_then(|n| n.strip_suffix(".rsnmt"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            found.insert(step, path);
        }
    }
    Ok(found.into_values().collect())
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:08}.rsnmt")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, StackingMode};

    fn cfg(stacking: StackingMode) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            stacking,
            src_vocab_size: 12,
            tgt_vocab_size: 11,
            share_src_tgt_embedding: false,
            tie_output_projection: true,
            dropout: 0.0,
            max_positions: 16,
        }
    }

    #[test]
    fn byte_round_trip_f32_and_f64() {
        let w = build_model::<f32>(&cfg(StackingMode::recurrent(3)), 4).unwrap();
        let ck = Checkpoint::from_weights(&w, 17);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..6], b"RSNMT1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_weights::<f32>().unwrap(), w);

        let w64 = build_model::<f64>(&cfg(StackingMode::vanilla(2)), 4).unwrap();
        let ck = Checkpoint::from_weights(&w64, 1);
        assert_eq!(ck.precision, Precision::F64);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.to_weights::<f64>().unwrap(), w64);
    }

    #[test]
    fn corrupted_and_truncated_files() {
        let w = build_model::<f32>(&cfg(StackingMode::recurrent(1)), 0).unwrap();
        let mut bytes = Checkpoint::from_weights(&w, 0).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..8]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn structure_mismatch_on_load() {
        let w = build_model::<f32>(&cfg(StackingMode::vanilla(2)), 0).unwrap();
        let ck = Checkpoint::from_weights(&w, 0);
        let err = ck
            .to_weights_for::<f32>(&cfg(StackingMode::recurrent(2)))
            .unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
    }

    #[test]
    fn averaging_simple_cases() {
        let w = build_model::<f64>(&cfg(StackingMode::recurrent(2)), 1).unwrap();
        let mut ck = Checkpoint::from_weights(&w, 3);
        // dyadic values keep 3x exactly representable
        let q = 2f64.powi(20);
        ck.arrays
            .iter_mut()
            .for_each(|a| a.data.iter_mut().for_each(|v| *v = (*v * q).round() / q));
        let avg = average_checkpoints(&[ck.clone(), ck.clone(), ck.clone()]).unwrap();
        assert_eq!(avg.arrays, ck.arrays);

        let mut zeros = ck.clone();
        let mut twos = ck.clone();
        zeros
            .arrays
            .iter_mut()
            .for_each(|a| a.data.iter_mut().for_each(|v| *v = 0.0));
        twos.arrays
            .iter_mut()
            .for_each(|a| a.data.iter_mut().for_each(|v| *v = 2.0));
        twos.step = 9;
        let avg = average_checkpoints(&[zeros, twos]).unwrap();
        assert!(avg.arrays.iter().all(|a| a.data.iter().all(|&v| v == 1.0)));
        assert_eq!(avg.step, 9);
    }

    #[test]
    fn averaging_rejects_mismatch() {
        let a = Checkpoint::from_weights(
            &build_model::<f32>(&cfg(StackingMode::recurrent(2)), 1).unwrap(),
            0,
        );
        let b = Checkpoint::from_weights(
            &build_model::<f32>(&cfg(StackingMode::vanilla(2)), 1).unwrap(),
            0,
        );
        assert!(average_checkpoints(&[a.clone(), b]).is_err());
        let mut c = a.clone();
        c.arrays[3].shape = vec![1];
        let err = average_checkpoints(&[a, c]).unwrap_err().to_string();
        assert!(err.contains("encoder.0"), "{err}");
        assert!(average_checkpoints(&[]).is_err());
    }

    #[test]
    fn exact_sum_is_order_free() {
        let v = [1e16, 1.0, -1e16, 3.0, 0.1, 0.2];
        let s = exact_sum(v);
        assert_eq!(s, 4.3);
        let mut r = v;
        r.reverse();
        assert_eq!(exact_sum(r), s);
        assert_eq!(exact_sum([0.1, 0.2, 0.3]), 0.6);
    }

    #[test]
    fn listing_orders_by_step() {
        let dir = tempfile::tempdir().unwrap();
        for s in [20u64, 3, 100] {
            fs::write(dir.path().join(checkpoint_name(s)), b"").unwrap();
        }
        fs::write(dir.path().join("other.txt"), b"").unwrap();
        let names: Vec<String> = list_checkpoints(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            vec![
                checkpoint_name(3),
                checkpoint_name(20),
                checkpoint_name(100)
            ]
        );
    }
}
