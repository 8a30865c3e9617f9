//! Evaluation: corpus BLEU, paired bootstrap, attention entropy and export.

mod attention;
mod bleu;

pub use attention::{
    attention_entropy, export_attention, AttentionDocument, AttentionStats, AttentionTrace,
    ExportedAttention, HeadAttention, LayerAttention,
};
pub use bleu::{bleu, bootstrap_significance, Better, EvalReport, Significance};
