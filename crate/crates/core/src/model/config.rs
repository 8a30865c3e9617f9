use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the encoder and decoder stacks are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackingMode {
    /// Independent parameters per layer.
    Vanilla {
        encoder_layers: usize,
        decoder_layers: usize,
    },
    /// One stored layer per side, applied `recurrences` times.
    Recurrent { recurrences: usize },
}

impl StackingMode {
    pub fn vanilla(n: usize) -> Self {
        StackingMode::Vanilla {
            encoder_layers: n,
            decoder_layers: n,
        }
    }

    pub fn recurrent(k: usize) -> Self {
        StackingMode::Recurrent { recurrences: k }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, StackingMode::Recurrent { .. })
    }

    /// Layer applications on the encoder side at training time.
    pub fn encoder_depth(&self) -> usize {
        match *self {
            StackingMode::Vanilla { encoder_layers, .. } => encoder_layers,
            StackingMode::Recurrent { recurrences } => recurrences,
        }
    }

    pub fn decoder_depth(&self) -> usize {
        match *self {
            StackingMode::Vanilla { decoder_layers, .. } => decoder_layers,
            StackingMode::Recurrent { recurrences } => recurrences,
        }
    }

    pub fn stored_encoder_layers(&self) -> usize {
        match *self {
            StackingMode::Vanilla { encoder_layers, .. } => encoder_layers,
            StackingMode::Recurrent { .. } => 1,
        }
    }

    pub fn stored_decoder_layers(&self) -> usize {
        match *self {
            StackingMode::Vanilla { decoder_layers, .. } => decoder_layers,
            StackingMode::Recurrent { .. } => 1,
        }
    }

    /// Resolves a requested depth for one side, enforcing that vanilla
    /// stacks run exactly their stored layers.
    pub(crate) fn resolve_depth(&self, requested: Option<usize>, encoder: bool) -> Result<usize> {
        let trained = if encoder {
            self.encoder_depth()
        } else {
            self.decoder_depth()
        };
        match (self, requested) {
            (_, None) => Ok(trained),
            (_, Some(0)) => Err(Error::InvalidArgument(
                "recurrences must be at least 1".into(),
            )),
            (StackingMode::Recurrent { .. }, Some(k)) => Ok(k),
            (StackingMode::Vanilla { .. }, Some(k)) if k == trained => Ok(k),
            (StackingMode::Vanilla { .. }, Some(k)) => Err(Error::InvalidArgument(format!(
                "vanilla {} has {trained} layers; cannot run {k}",
                if encoder { "encoder" } else { "decoder" }
            ))),
        }
    }
}

fn default_max_positions() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub stacking: StackingMode,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    #[serde(default)]
    pub share_src_tgt_embedding: bool,
    #[serde(default)]
    pub tie_output_projection: bool,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return fail("d_model, d_ff and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        match self.stacking {
            StackingMode::Vanilla {
                encoder_layers,
                decoder_layers,
            } if encoder_layers == 0 || decoder_layers == 0 => {
                return fail("vanilla stacks need at least one layer per side".into())
            }
            StackingMode::Recurrent { recurrences: 0 } => {
                return fail("recurrences must be at least 1".into())
            }
            _ => {}
        }
        if self.src_vocab_size < 5 || self.tgt_vocab_size < 5 {
            return fail("vocabularies need the 4 reserved ids plus at least one token".into());
        }
        if self.share_src_tgt_embedding && self.src_vocab_size != self.tgt_vocab_size {
            return fail(format!(
                "shared embedding needs equal vocabularies, got {} and {}",
                self.src_vocab_size, self.tgt_vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive".into());
        }
        Ok(())
    }

    pub fn with_stacking(&self, stacking: StackingMode) -> Self {
        ModelConfig {
            stacking,
            ..self.clone()
        }
    }

    /// Same widths, vocabularies and sharing flags.
    pub fn same_shape_as(&self, other: &ModelConfig) -> bool {
        self.d_model == other.d_model
            && self.d_ff == other.d_ff
            && self.n_heads == other.n_heads
            && self.src_vocab_size == other.src_vocab_size
            && self.tgt_vocab_size == other.tgt_vocab_size
    }
}

fn attention_params(d: usize) -> usize {
    4 * d * d
}

fn ffn_params(d: usize, d_ff: usize) -> usize {
    d * d_ff + d_ff + d_ff * d + d
}

fn norm_params(d: usize) -> usize {
    2 * d
}

pub fn encoder_layer_params(d: usize, d_ff: usize) -> usize {
    attention_params(d) + ffn_params(d, d_ff) + 2 * norm_params(d)
}

pub fn decoder_layer_params(d: usize, d_ff: usize) -> usize {
    2 * attention_params(d) + ffn_params(d, d_ff) + 3 * norm_params(d)
}

/// Trainable parameters implied by the config. Shared or tied matrices count once.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let mut total = config.src_vocab_size * d;
    if !config.share_src_tgt_embedding {
        total += config.tgt_vocab_size * d;
    }
    if !config.tie_output_projection {
        total += d * config.tgt_vocab_size;
    }
    total += config.stacking.stored_encoder_layers() * encoder_layer_params(d, config.d_ff);
    total += config.stacking.stored_decoder_layers() * decoder_layer_params(d, config.d_ff);
    total
}
