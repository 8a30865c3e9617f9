use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{sinusoidal_positions, Float, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<F> {
    pub query: Tensor<F>,
    pub key: Tensor<F>,
    pub value: Tensor<F>,
    pub output: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardWeights<F> {
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormWeights<F> {
    pub gain: Tensor<F>,
    pub bias: Tensor<F>,
}

/// One encoder or decoder layer. Decoder layers carry cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<F> {
    pub self_attn: AttentionWeights<F>,
    pub self_attn_norm: NormWeights<F>,
    pub cross_attn: Option<AttentionWeights<F>>,
    pub cross_attn_norm: Option<NormWeights<F>>,
    pub ffn: FeedForwardWeights<F>,
    pub ffn_norm: NormWeights<F>,
}

/// The full parameter store.
///
/// `tgt_embedding` is `None` when it aliases `src_embedding`, and
/// `output_projection` is `None` when the softmax layer reuses the target
/// embedding. In recurrent mode each stack holds exactly one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<F> {
    pub config: ModelConfig,
    pub src_embedding: Tensor<F>,
    pub tgt_embedding: Option<Tensor<F>>,
    pub output_projection: Option<Tensor<F>>,
    pub encoder_layers: Vec<LayerWeights<F>>,
    pub decoder_layers: Vec<LayerWeights<F>>,
    pub positions: Tensor<F>,
}

struct Init<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform<F: Float>(&mut self, shape: &[usize], limit: f64) -> Tensor<F> {
        Tensor::from_fn(shape, |_| F::of(self.rng.random_range(-limit..limit)))
            .with_requires_grad(true)
    }

    fn glorot<F: Float>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<F> {
        self.uniform(&[fan_in, fan_out], (6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    fn embedding<F: Float>(&mut self, vocab: usize, d: usize) -> Tensor<F> {
        // std d^-1/2, so the √d input scaling yields unit variance
        self.uniform(&[vocab, d], (3.0 / d as f64).sqrt())
    }

    fn attention<F: Float>(&mut self, d: usize) -> AttentionWeights<F> {
        AttentionWeights {
            query: self.glorot(d, d),
            key: self.glorot(d, d),
            value: self.glorot(d, d),
            output: self.glorot(d, d),
        }
    }

    fn norm<F: Float>(d: usize) -> NormWeights<F> {
        NormWeights {
            gain: Tensor::full(&[d], F::one()).with_requires_grad(true),
            bias: Tensor::zeros(&[d]).with_requires_grad(true),
        }
    }

    fn layer<F: Float>(&mut self, d: usize, d_ff: usize, decoder: bool) -> LayerWeights<F> {
        let self_attn = self.attention(d);
        let cross_attn = decoder.then(|| self.attention(d));
        let ffn = FeedForwardWeights {
            w1: self.glorot(d, d_ff),
            b1: Tensor::zeros(&[d_ff]).with_requires_grad(true),
            w2: self.glorot(d_ff, d),
            b2: Tensor::zeros(&[d]).with_requires_grad(true),
        };
        LayerWeights {
            self_attn,
            self_attn_norm: Self::norm(d),
            cross_attn,
            cross_attn_norm: decoder.then(|| Self::norm(d)),
            ffn,
            ffn_norm: Self::norm(d),
        }
    }
}

/// Initializes a model deterministically from `seed`.
pub fn build_model<F: Float>(config: &ModelConfig, seed: u64) -> Result<ModelWeights<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init { rng: &mut rng };
    let d = config.d_model;
    let src_embedding = init.embedding(config.src_vocab_size, d);
    let tgt_embedding =
        (!config.share_src_tgt_embedding).then(|| init.embedding(config.tgt_vocab_size, d));
    let output_projection =
        (!config.tie_output_projection).then(|| init.glorot(d, config.tgt_vocab_size));
    let encoder_layers = (0..config.stacking.stored_encoder_layers())
        .map(|_| init.layer(d, config.d_ff, false))
        .collect();
    let decoder_layers = (0..config.stacking.stored_decoder_layers())
        .map(|_| init.layer(d, config.d_ff, true))
        .collect();
    Ok(ModelWeights {
        config: config.clone(),
        src_embedding,
        tgt_embedding,
        output_projection,
        encoder_layers,
        decoder_layers,
        positions: sinusoidal_positions(config.max_positions, d),
    })
}

impl<F> AttentionWeights<F> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s Tensor<F>)) {
        f(format!("{prefix}.query"), &self.query);
        f(format!("{prefix}.key"), &self.key);
        f(format!("{prefix}.value"), &self.value);
        f(format!("{prefix}.output"), &self.output);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<F>)) {
        f(format!("{prefix}.query"), &mut self.query);
        f(format!("{prefix}.key"), &mut self.key);
        f(format!("{prefix}.value"), &mut self.value);
        f(format!("{prefix}.output"), &mut self.output);
    }
}

impl<F> NormWeights<F> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s Tensor<F>)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<F>)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<F> LayerWeights<F> {
    /// Visits every tensor of the layer in a fixed order.
    pub fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s Tensor<F>)) {
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.self_attn_norm
            .visit(&format!("{prefix}.self_attn_norm"), f);
        if let Some(c) = &self.cross_attn {
            c.visit(&format!("{prefix}.cross_attn"), f);
        }
        if let Some(n) = &self.cross_attn_norm {
            n.visit(&format!("{prefix}.cross_attn_norm"), f);
        }
        f(format!("{prefix}.ffn.w1"), &self.ffn.w1);
        f(format!("{prefix}.ffn.b1"), &self.ffn.b1);
        f(format!("{prefix}.ffn.w2"), &self.ffn.w2);
        f(format!("{prefix}.ffn.b2"), &self.ffn.b2);
        self.ffn_norm.visit(&format!("{prefix}.ffn_norm"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<F>)) {
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.self_attn_norm
            .visit_mut(&format!("{prefix}.self_attn_norm"), f);
        if let Some(c) = &mut self.cross_attn {
            c.visit_mut(&format!("{prefix}.cross_attn"), f);
        }
        if let Some(n) = &mut self.cross_attn_norm {
            n.visit_mut(&format!("{prefix}.cross_attn_norm"), f);
        }
        f(format!("{prefix}.ffn.w1"), &mut self.ffn.w1);
        f(format!("{prefix}.ffn.b1"), &mut self.ffn.b1);
        f(format!("{prefix}.ffn.w2"), &mut self.ffn.w2);
        f(format!("{prefix}.ffn.b2"), &mut self.ffn.b2);
        self.ffn_norm.visit_mut(&format!("{prefix}.ffn_norm"), f);
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t));
        out
    }
}

impl<F: Float> ModelWeights<F> {
    /// Visits every trainable tensor once, in checkpoint order.
    pub fn visit<'s>(&'s self, mut f: impl FnMut(String, &'s Tensor<F>)) {
        f("src_embedding".into(), &self.src_embedding);
        if let Some(t) = &self.tgt_embedding {
            f("tgt_embedding".into(), t);
        }
        if let Some(t) = &self.output_projection {
            f("output_projection".into(), t);
        }
        for (i, l) in self.encoder_layers.iter().enumerate() {
            l.visit(&format!("encoder.{i}"), &mut f);
        }
        for (i, l) in self.decoder_layers.iter().enumerate() {
            l.visit(&format!("decoder.{i}"), &mut f);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Tensor<F>)) {
        f("src_embedding".into(), &mut self.src_embedding);
        if let Some(t) = &mut self.tgt_embedding {
            f("tgt_embedding".into(), t);
        }
        if let Some(t) = &mut self.output_projection {
            f("output_projection".into(), t);
        }
        for (i, l) in self.encoder_layers.iter_mut().enumerate() {
            l.visit_mut(&format!("encoder.{i}"), &mut f);
        }
        for (i, l) in self.decoder_layers.iter_mut().enumerate() {
            l.visit_mut(&format!("decoder.{i}"), &mut f);
        }
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        self.visit(|n, t| out.push((n, t)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.numel());
        n
    }

    pub fn target_embedding(&self) -> &Tensor<F> {
        self.tgt_embedding.as_ref().unwrap_or(&self.src_embedding)
    }

    /// Checks the structural invariants against `config`.
    pub fn check_structure(&self) -> Result<()> {
        let c = &self.config;
        let d = c.d_model;
        let fail = |msg: String| Err(Error::Structure(msg));
        if self.encoder_layers.len() != c.stacking.stored_encoder_layers() {
            return fail(format!(
                "config expects {} encoder layers, weights hold {}",
                c.stacking.stored_encoder_layers(),
                self.encoder_layers.len()
            ));
        }
        if self.decoder_layers.len() != c.stacking.stored_decoder_layers() {
            return fail(format!(
                "config expects {} decoder layers, weights hold {}",
                c.stacking.stored_decoder_layers(),
                self.decoder_layers.len()
            ));
        }
        if self.tgt_embedding.is_some() == c.share_src_tgt_embedding {
            return fail("target embedding presence disagrees with share_src_tgt_embedding".into());
        }
        if self.output_projection.is_some() == c.tie_output_projection {
            return fail("output projection presence disagrees with tie_output_projection".into());
        }
        let reference = build_shapes(c);
        let mut actual = Vec::new();
        self.visit(|n, t| actual.push((n, t.shape().to_vec())));
        if reference != actual {
            let diff = reference
                .iter()
                .zip(&actual)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| "tensor count differs".into());
            return fail(diff);
        }
        if self.positions.shape() != [c.max_positions, d] {
            return fail("position table shape".into());
        }
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> ModelWeights<G> {
        let layer = |l: &LayerWeights<F>| -> LayerWeights<G> {
            let att = |a: &AttentionWeights<F>| AttentionWeights {
                query: a.query.cast(),
                key: a.key.cast(),
                value: a.value.cast(),
                output: a.output.cast(),
            };
            let norm = |n: &NormWeights<F>| NormWeights {
                gain: n.gain.cast(),
                bias: n.bias.cast(),
            };
            LayerWeights {
                self_attn: att(&l.self_attn),
                self_attn_norm: norm(&l.self_attn_norm),
                cross_attn: l.cross_attn.as_ref().map(att),
                cross_attn_norm: l.cross_attn_norm.as_ref().map(norm),
                ffn: FeedForwardWeights {
                    w1: l.ffn.w1.cast(),
                    b1: l.ffn.b1.cast(),
                    w2: l.ffn.w2.cast(),
                    b2: l.ffn.b2.cast(),
                },
                ffn_norm: norm(&l.ffn_norm),
            }
        };
        ModelWeights {
            config: self.config.clone(),
            src_embedding: self.src_embedding.cast(),
            tgt_embedding: self.tgt_embedding.as_ref().map(Tensor::cast),
            output_projection: self.output_projection.as_ref().map(Tensor::cast),
            encoder_layers: self.encoder_layers.iter().map(layer).collect(),
            decoder_layers: self.decoder_layers.iter().map(layer).collect(),
            positions: sinusoidal_positions(self.config.max_positions, self.config.d_model),
        }
    }
}

/// Expected (name, shape) manifest for a config, in checkpoint order.
pub fn build_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, ff) = (config.d_model, config.d_ff);
    let mut out = vec![("src_embedding".to_string(), vec![config.src_vocab_size, d])];
    if !config.share_src_tgt_embedding {
        out.push(("tgt_embedding".into(), vec![config.tgt_vocab_size, d]));
    }
    if !config.tie_output_projection {
        out.push(("output_projection".into(), vec![d, config.tgt_vocab_size]));
    }
    let mut layer = |prefix: String, decoder: bool| {
        let mut att = |name: &str| {
            for p in ["query", "key", "value", "output"] {
                out.push((format!("{prefix}.{name}.{p}"), vec![d, d]));
            }
        };
        att("self_attn");
        let mut v = Vec::new();
        v.push((format!("{prefix}.self_attn_norm.gain"), vec![d]));
        v.push((format!("{prefix}.self_attn_norm.bias"), vec![d]));
        out.extend(v);
        if decoder {
            for p in ["query", "key", "value", "output"] {
                out.push((format!("{prefix}.cross_attn.{p}"), vec![d, d]));
            }
            out.push((format!("{prefix}.cross_attn_norm.gain"), vec![d]));
            out.push((format!("{prefix}.cross_attn_norm.bias"), vec![d]));
        }
        out.push((format!("{prefix}.ffn.w1"), vec![d, ff]));
        out.push((format!("{prefix}.ffn.b1"), vec![ff]));
        out.push((format!("{prefix}.ffn.w2"), vec![ff, d]));
        out.push((format!("{prefix}.ffn.b2"), vec![d]));
        out.push((format!("{prefix}.ffn_norm.gain"), vec![d]));
        out.push((format!("{prefix}.ffn_norm.bias"), vec![d]));
    };
    for i in 0..config.stacking.stored_encoder_layers() {
        layer(format!("encoder.{i}"), false);
    }
    for i in 0..config.stacking.stored_decoder_layers() {
        layer(format!("decoder.{i}"), true);
    }
    out
}

pub(crate) struct AttentionVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
}

pub(crate) struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

pub(crate) struct LayerVars {
    pub self_attn: AttentionVars,
    pub self_attn_norm: NormVars,
    pub cross: Option<(AttentionVars, NormVars)>,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ffn_norm: NormVars,
}

/// Model parameters recorded as leaves of one tape.
///
/// Each stored tensor becomes exactly one leaf, so a shared layer applied
/// several times accumulates the gradient of every application.
pub struct ModelVars {
    pub(crate) src_embedding: Var,
    pub(crate) tgt_embedding: Var,
    pub(crate) output_projection: Option<Var>,
    pub(crate) encoder: Vec<LayerVars>,
    pub(crate) decoder: Vec<LayerVars>,
    /// Leaves in checkpoint order, one per stored tensor.
    pub(crate) ordered: Vec<Var>,
}

impl ModelVars {
    pub fn bind<'a, F: Float>(tape: &mut Tape<'a, F>, w: &'a ModelWeights<F>) -> ModelVars {
        let mut ordered = Vec::new();
        let mut leaf = |tape: &mut Tape<'a, F>, t: &'a Tensor<F>| {
            let v = tape.leaf(t);
            ordered.push(v);
            v
        };
        let src_embedding = leaf(tape, &w.src_embedding);
        let tgt_embedding = match &w.tgt_embedding {
            Some(t) => leaf(tape, t),
            None => src_embedding,
        };
        let output_projection = w.output_projection.as_ref().map(|t| leaf(tape, t));
        let mut bind_layer = |tape: &mut Tape<'a, F>, l: &'a LayerWeights<F>| {
            let mut att = |tape: &mut Tape<'a, F>, a: &'a AttentionWeights<F>| AttentionVars {
                query: leaf(tape, &a.query),
                key: leaf(tape, &a.key),
                value: leaf(tape, &a.value),
                output: leaf(tape, &a.output),
            };
            let self_attn = att(tape, &l.self_attn);
            let self_attn_norm = NormVars {
                gain: leaf(tape, &l.self_attn_norm.gain),
                bias: leaf(tape, &l.self_attn_norm.bias),
            };
            let cross = match (&l.cross_attn, &l.cross_attn_norm) {
                (Some(a), Some(n)) => {
                    let av = AttentionVars {
                        query: leaf(tape, &a.query),
                        key: leaf(tape, &a.key),
                        value: leaf(tape, &a.value),
                        output: leaf(tape, &a.output),
                    };
                    let nv = NormVars {
                        gain: leaf(tape, &n.gain),
                        bias: leaf(tape, &n.bias),
                    };
                    Some((av, nv))
                }
                _ => None,
            };
            LayerVars {
                self_attn,
                self_attn_norm,
                cross,
                w1: leaf(tape, &l.ffn.w1),
                b1: leaf(tape, &l.ffn.b1),
                w2: leaf(tape, &l.ffn.w2),
                b2: leaf(tape, &l.ffn.b2),
                ffn_norm: NormVars {
                    gain: leaf(tape, &l.ffn_norm.gain),
                    bias: leaf(tape, &l.ffn_norm.bias),
                },
            }
        };
        let encoder = w
            .encoder_layers
            .iter()
            .map(|l| bind_layer(tape, l))
            .collect();
        let decoder = w
            .decoder_layers
            .iter()
            .map(|l| bind_layer(tape, l))
            .collect();
        ModelVars {
            src_embedding,
            tgt_embedding,
            output_projection,
            encoder,
            decoder,
            ordered,
        }
    }

    /// Gradients in checkpoint order; zeros where the loss did not reach.
    pub fn gradients<F: Float>(&self, tape: &mut Tape<'_, F>) -> Vec<Vec<F>> {
        self.ordered
            .iter()
            .map(|&v| {
                tape.take_grad(v)
                    .unwrap_or_else(|| vec![F::zero(); tape.value(v).len()])
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{count_parameters, StackingMode};

    fn cfg(stacking: StackingMode, share: bool, tie: bool) -> ModelConfig {
        ModelConfig {
            d_model: 4,
            d_ff: 8,
            n_heads: 2,
            stacking,
            src_vocab_size: 10,
            tgt_vocab_size: 10,
            share_src_tgt_embedding: share,
            tie_output_projection: tie,
            dropout: 0.0,
            max_positions: 16,
        }
    }

    #[test]
    fn structure_per_mode() {
        let rs = build_model::<f32>(&cfg(StackingMode::recurrent(6), false, false), 1).unwrap();
        assert_eq!((rs.encoder_layers.len(), rs.decoder_layers.len()), (1, 1));
        let v = build_model::<f32>(&cfg(StackingMode::vanilla(6), false, false), 1).unwrap();
        assert_eq!((v.encoder_layers.len(), v.decoder_layers.len()), (6, 6));
        assert!(v.encoder_layers[0].cross_attn.is_none());
        assert!(v.decoder_layers[0].cross_attn.is_some());
        rs.check_structure().unwrap();
        v.check_structure().unwrap();
    }

    #[test]
    fn build_is_deterministic() {
        let c = cfg(StackingMode::recurrent(2), true, true);
        let a = build_model::<f32>(&c, 9).unwrap();
        let b = build_model::<f32>(&c, 9).unwrap();
        assert_eq!(a, b);
        let other = build_model::<f32>(&c, 10).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn count_matches_shape_walk() {
        for (share, tie) in [(false, false), (true, false), (false, true), (true, true)] {
            for mode in [StackingMode::vanilla(2), StackingMode::recurrent(3)] {
                let c = cfg(mode, share, tie);
                let w = build_model::<f64>(&c, 0).unwrap();
                let walked: usize = w.named_parameters().iter().map(|(_, t)| t.numel()).sum();
                assert_eq!(walked, count_parameters(&c));
                let manifest: usize = build_shapes(&c)
                    .iter()
                    .map(|(_, s)| s.iter().product::<usize>())
                    .sum();
                assert_eq!(manifest, walked);
            }
        }
    }

    #[test]
    fn toy_count_by_hand() {
        // V=10 shared (tied output), d=4, d_ff=8, Vanilla(2,2)
        // embedding 40; encoder layer 4*16 + (32+8+32+4) + 2*8 = 156;
        // decoder layer 8*16 + 76 + 3*8 = 228
        let c = cfg(StackingMode::vanilla(2), true, true);
        assert_eq!(count_parameters(&c), 40 + 2 * 156 + 2 * 228);
    }

    #[test]
    fn structure_mismatch_detected() {
        let mut w = build_model::<f32>(&cfg(StackingMode::vanilla(2), false, false), 0).unwrap();
        w.config.stacking = StackingMode::recurrent(2);
        assert!(matches!(w.check_structure(), Err(Error::Structure(_))));
    }
}
