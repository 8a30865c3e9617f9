use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAttention {
    pub index: usize,
    /// One probability row over source positions per target position.
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAttention {
    /// Layer application depth, 0-based. For recurrent models this is the
    /// recurrence step.
    pub index: usize,
    pub heads: Vec<HeadAttention>,
}

/// Attention maps of one sentence across layer applications and heads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub layers: Vec<LayerAttention>,
}

impl AttentionTrace {
    pub fn is_empty(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.heads.iter().all(|h| h.rows.is_empty()))
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| {
            l.heads
                .iter()
                .flat_map(|h| h.rows.iter().map(Vec::as_slice))
        })
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.rows()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Shannon entropy in nats, `0·ln 0 = 0`.
pub fn attention_entropy(row: &[f64]) -> Result<f64> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|&p| p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "attention row is not a distribution (sum {sum})"
        )));
    }
    Ok(-row
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>())
}

/// Entropy summaries of a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    /// `[layer][head][target position]`
    pub per_position: Vec<Vec<Vec<f64>>>,
    /// `[layer][head]`, averaged over target positions.
    pub mean: Vec<Vec<f64>>,
    /// Mean L1 distance between the rows of consecutive layer applications,
    /// averaged over heads and positions; `len = layers - 1`.
    pub recurrence_l1: Vec<f64>,
}

impl AttentionStats {
    pub fn from_trace(trace: &AttentionTrace) -> Result<Self> {
        let per_position = trace
            .layers
            .iter()
            .map(|l| {
                l.heads
                    .iter()
                    .map(|h| {
                        h.rows
                            .iter()
                            .map(|r| attention_entropy(r))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = per_position
            .iter()
            .map(|l| {
                l.iter()
                    .map(|h| {
                        if h.is_empty() {
                            0.0
                        } else {
                            h.iter().sum::<f64>() / h.len() as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let recurrence_l1 = trace
            .layers
            .windows(2)
            .map(|pair| {
                let (mut total, mut count) = (0.0, 0usize);
                for (ha, hb) in pair[0].heads.iter().zip(&pair[1].heads) {
                    for (ra, rb) in ha.rows.iter().zip(&hb.rows) {
                        total += ra.iter().zip(rb).map(|(a, b)| (a - b).abs()).sum::<f64>();
                        count += 1;
                    }
                }
                if count == 0 {
                    0.0
                } else {
                    total / count as f64
                }
            })
            .collect();
        Ok(AttentionStats {
            per_position,
            mean,
            recurrence_l1,
        })
    }
}

/// JSON document written by [`export_attention`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDocument {
    pub sentence: String,
    pub target: String,
    pub layers: Vec<LayerAttention>,
    /// Mean entropy, `[layer][head]`.
    pub entropies: Vec<Vec<f64>>,
    pub recurrence_l1: Vec<f64>,
}

impl AttentionDocument {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn trace(&self) -> AttentionTrace {
        AttentionTrace {
            layers: self.layers.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExportedAttention {
    pub json: PathBuf,
    pub svgs: Vec<PathBuf>,
}

const CELL: usize = 24;
const LABEL_W: usize = 64;
const LABEL_H: usize = 72;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One grayscale grid: rows are heads, columns source tokens, for the
/// target position `position`. Darker cells carry more probability.
fn layer_svg(layer: &LayerAttention, source: &[String], position: usize) -> String {
    let cols = layer
        .heads
        .iter()
        .filter_map(|h| h.rows.get(position).map(Vec::len))
        .max()
        .unwrap_or(0);
    let (w, h) = (LABEL_W + cols * CELL, LABEL_H + layer.heads.len() * CELL);
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        s,
        r#"<title>layer {} target position {position}</title>"#,
        layer.index
    );
    for c in 0..cols {
        let label = source.get(c).map(String::as_str).unwrap_or("");
        let x = LABEL_W + c * CELL + CELL / 2;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" font-size="10" transform="rotate(-60 {x} {})">{}</text>"#,
            LABEL_H - 4,
            LABEL_H - 4,
            escape(label)
        );
    }
    for (r, head) in layer.heads.iter().enumerate() {
        let y = LABEL_H + r * CELL;
        let _ = writeln!(
            s,
            r#"<text x="2" y="{}" font-size="10">head {}</text>"#,
            y + CELL / 2 + 3,
            head.index
        );
        let Some(row) = head.rows.get(position) else {
            continue;
        };
        for (c, &p) in row.iter().enumerate() {
            let g = (255.0 * (1.0 - p.clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({g},{g},{g})"><title>{p}</title></rect>"#,
                LABEL_W + c * CELL
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `attention.json` and one `layer_<i>.svg` per layer into `out_dir`.
pub fn export_attention(
    trace: &AttentionTrace,
    stats: &AttentionStats,
    source: &[String],
    target: &[String],
    position: usize,
    out_dir: &Path,
) -> Result<ExportedAttention> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("attention trace is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let doc = AttentionDocument {
        sentence: source.join(" "),
        target: target.join(" "),
        layers: trace.layers.clone(),
        entropies: stats.mean.clone(),
        recurrence_l1: stats.recurrence_l1.clone(),
    };
    let json = out_dir.join("attention.json");
    fs::write(&json, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&json, e))?;
    let mut svgs = Vec::new();
    for layer in &trace.layers {
        let path = out_dir.join(format!("layer_{}.svg", layer.index));
        fs::write(&path, layer_svg(layer, source, position)).map_err(|e| Error::io(&path, e))?;
        svgs.push(path);
    }
    Ok(ExportedAttention { json, svgs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert_eq!(attention_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        for l in [1usize, 2, 5, 17] {
            let row = vec![1.0 / l as f64; l];
            assert!((attention_entropy(&row).unwrap() - (l as f64).ln()).abs() < 1e-12);
        }
        assert!(
            (attention_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs()
                < 1e-12
        );
        assert!(attention_entropy(&[0.5, 0.4]).is_err());
        assert!(attention_entropy(&[1.5, -0.5]).is_err());
    }

    fn toy_trace() -> AttentionTrace {
        AttentionTrace {
            layers: (0..2)
                .map(|l| LayerAttention {
                    index: l,
                    heads: (0..3)
                        .map(|h| HeadAttention {
                            index: h,
                            rows: vec![
                                vec![0.1 * (h + 1) as f64, 1.0 - 0.1 * (h + 1) as f64, 0.0];
                                2
                            ],
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn stats_shapes_and_l1() {
        let t = toy_trace();
        let s = AttentionStats::from_trace(&t).unwrap();
        assert_eq!(s.mean.len(), 2);
        assert_eq!(s.mean[0].len(), 3);
        assert_eq!(s.recurrence_l1, vec![0.0]);
    }

    #[test]
    fn export_writes_json_and_svgs() {
        let dir = tempfile::tempdir().unwrap();
        let t = toy_trace();
        let s = AttentionStats::from_trace(&t).unwrap();
        let src: Vec<String> = ["a", "<b>", "c"].iter().map(|s| s.to_string()).collect();
        let out = export_attention(&t, &s, &src, &["x".to_string()], 1, dir.path()).unwrap();
        let doc = AttentionDocument::load(&out.json).unwrap();
        assert_eq!(doc.trace(), t);
        assert_eq!(out.svgs.len(), 2);
        let svg = fs::read_to_string(&out.svgs[0]).unwrap();
        assert_eq!(svg.matches(r#"class="cell""#).count(), 3 * 3);
        assert!(svg.contains("&lt;b&gt;"));
        assert!(
            export_attention(&AttentionTrace::default(), &s, &src, &[], 0, dir.path()).is_err()
        );
    }
}
