use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "rsnmt",
    version,
    about = "Transformer translation with recurrently stacked layers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Write a synthetic parallel corpus (train and test splits).
    GenToy(GenToyArgs),
    /// Train a model from a parallel corpus.
    Train(TrainArgs),
    /// Translate a file of source sentences.
    Translate(TranslateArgs),
    /// Build a sequence-level distilled corpus from a teacher.
    Distill(DistillArgs),
    /// Back-translate target-side monolingual text with a reverse model.
    Augment(AugmentArgs),
    /// Average the last N checkpoints of a run.
    Average(AverageArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Bleu(BleuArgs),
    /// Paired bootstrap comparison of two systems.
    Significance(SignificanceArgs),
    /// Parameter counts across stacking modes for one configuration.
    Params(ParamsArgs),
    /// Decode a test set once per decoder recurrence count.
    SweepRecurrence(SweepArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Recurrent stacking with K applications of one shared layer.
    #[arg(long, value_name = "K", conflicts_with = "layers")]
    pub recurrences: Option<usize>,
    /// Vanilla stacking with N distinct layers per side.
    #[arg(long, value_name = "N")]
    pub layers: Option<usize>,
    #[arg(long)]
    pub share_embeddings: Option<bool>,
    #[arg(long)]
    pub tie_output: Option<bool>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_positions: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DecodeFlags {
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Greedy search (beam 1, alpha 0).
    #[arg(long, conflicts_with_all = ["beam", "alpha"])]
    pub greedy: bool,
    #[arg(long)]
    pub max_len_a: Option<usize>,
    #[arg(long)]
    pub max_len_b: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GenToyArgs {
    /// copy, reversal or lexicon
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 200)]
    pub test_pairs: usize,
    #[arg(long, default_value_t = 50)]
    pub vocab: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 8)]
    pub max_len: usize,
    /// Probability of replacing each training target word at random.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, env = "RSNMT_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON file with optional `model`, `train` and `data` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train_src: Option<PathBuf>,
    #[arg(long)]
    pub train_tgt: Option<PathBuf>,
    /// Run directory for vocabularies, checkpoints and the final model.
    #[arg(long)]
    pub out: PathBuf,
    /// Train on the first ⌈f·n⌉ pairs of a seeded shuffle.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Vocabulary size cap per side, reserved tokens included.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub keep_last: Option<usize>,
    /// Final model is the average of this many most recent checkpoints.
    #[arg(long)]
    pub average_last: Option<usize>,
    #[arg(long, env = "RSNMT_SEED")]
    pub seed: Option<u64>,
    /// Vanilla teacher run directory (or checkpoint) for layer transfer.
    #[arg(long)]
    pub init_from_teacher: Option<PathBuf>,
    /// 1-based teacher encoder layer; defaults to --l-dec or 1.
    #[arg(long, requires = "init_from_teacher")]
    pub l_enc: Option<usize>,
    /// 1-based teacher decoder layer; defaults to --l-enc or 1.
    #[arg(long, requires = "init_from_teacher")]
    pub l_dec: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    /// Run directory or checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// JSON file with an optional `decode` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[arg(long)]
    pub dec_recurrence: Option<usize>,
    #[arg(long)]
    pub enc_recurrence: Option<usize>,
    /// Report wall time including model load and output write.
    #[arg(long)]
    pub time: bool,
    /// Write cross-attention JSON and SVG heatmaps for one sentence here.
    #[arg(long)]
    pub attention_out: Option<PathBuf>,
    /// 0-based input line whose attention is exported.
    #[arg(long, default_value_t = 0)]
    pub attention_sentence: usize,
    /// 0-based target position drawn in the heatmaps.
    #[arg(long, default_value_t = 0)]
    pub attention_position: usize,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    /// Original targets, used for the similarity BLEU and --mix.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[arg(long, default_value_t = 10_000)]
    pub sample_size: usize,
    /// Append distilled pairs to the original corpus.
    #[arg(long, requires = "reference")]
    pub mix: bool,
    #[arg(long, env = "RSNMT_SEED")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Target-to-source model run directory or checkpoint.
    #[arg(long)]
    pub reverse_model: PathBuf,
    /// Target-language monolingual sentences.
    #[arg(long)]
    pub mono: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Concatenate with the original corpus given by --orig-src/--orig-tgt.
    #[arg(long, requires_all = ["orig_src", "orig_tgt"])]
    pub mix: bool,
    #[arg(long)]
    pub orig_src: Option<PathBuf>,
    #[arg(long)]
    pub orig_tgt: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[arg(long, env = "RSNMT_SEED")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct AverageArgs {
    /// Checkpoint directory, or a run directory containing `checkpoints/`.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub last: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BleuArgs {
    pub hyp: PathBuf,
    pub reference: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub order: usize,
    /// Lowercase both sides before scoring.
    #[arg(long)]
    pub lowercase: bool,
    /// Print the full report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct SignificanceArgs {
    pub hyp_a: PathBuf,
    pub hyp_b: PathBuf,
    pub reference: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0.05)]
    pub p: f64,
    #[arg(long, env = "RSNMT_SEED")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    /// JSON file with a `model` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub src_vocab: Option<usize>,
    #[arg(long)]
    pub tgt_vocab: Option<usize>,
    /// Largest depth listed for each stacking mode.
    #[arg(long, default_value_t = 6)]
    pub max_depth: usize,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Inclusive decoder recurrence range, e.g. `1..8`.
    #[arg(long, default_value = "1..8")]
    pub range: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
    /// Directory for the sweep table and resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
