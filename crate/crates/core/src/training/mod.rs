//! Teacher-forced training with Adam and an inverse-square-root schedule.

mod checkpoint;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    average_checkpoint_files, average_checkpoints, checkpoint_name, list_checkpoints, ArrayEntry,
    Checkpoint, NamedArray, Precision, Provenance, MAGIC,
};

use crate::data::{make_batches, BatchPair, EncodedCorpus};
use crate::error::{Error, Result};
use crate::model::{training_loss, ForwardCtx, ModelWeights};
use crate::tensor::{Float, Tape};

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_adam_eps() -> f64 {
    1e-9
}
fn default_label_smoothing() -> f64 {
    0.1
}
fn default_keep_last() -> usize {
    10
}
fn default_batch_tokens() -> usize {
    2048
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_label_smoothing")]
    pub label_smoothing: f64,
    /// 0 disables periodic checkpoints (a final one is still written).
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_keep_last")]
    pub keep_last: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch_tokens")]
    pub batch_size_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 1000,
            warmup_steps: 4000,
            base_lr: 1.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            label_smoothing: default_label_smoothing(),
            checkpoint_every: 0,
            keep_last: default_keep_last(),
            seed: 0,
            batch_size_tokens: default_batch_tokens(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if self.keep_last < 1 {
            return Err(Error::Config("keep_last must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        if self.base_lr < 0.0 {
            return Err(Error::Config("base_lr must be non-negative".into()));
        }
        Ok(())
    }
}

/// `base_lr · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_at(step: u64, warmup_steps: u64, base_lr: f64, d_model: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup_steps.max(1) as f64;
    base_lr * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// First and second moment estimates, one buffer per stored tensor.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
}

impl<F: Float> AdamState<F> {
    pub fn new(w: &ModelWeights<F>) -> Self {
        let mut m = Vec::new();
        w.visit(|_, t| m.push(vec![F::zero(); t.numel()]));
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one bias-corrected Adam update.
    pub fn update(
        &mut self,
        w: &mut ModelWeights<F>,
        grads: &[Vec<F>],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = F::of(lr * c2.sqrt() / c1);
        let (fb1, fb2, eps) = (F::of(b1), F::of(b2), F::of(cfg.adam_eps * c2.sqrt()));
        let (one_b1, one_b2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        w.visit_mut(|_, t| {
            let (m, v, g) = (&mut ms[k], &mut vs[k], &grads[k]);
            for (((p, m), v), &g) in t
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g)
            {
                *m = fb1 * *m + one_b1 * g;
                *v = fb2 * *v + one_b2 * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
            k += 1;
        });
    }
}

/// Loss and gradients of one teacher-forced batch, gradients in checkpoint order.
pub fn compute_gradients<F: Float>(
    w: &ModelWeights<F>,
    batch: &BatchPair,
    label_smoothing: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Vec<F>>)> {
    let (tgt_in, targets) = batch.teacher_forcing();
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx { rng };
    let (loss, vars) = training_loss(
        &mut tape,
        w,
        &batch.src,
        &tgt_in,
        &targets,
        label_smoothing,
        &mut ctx,
    )?;
    let value = tape.value(loss)[0].as_f64();
    tape.backward(loss)?;
    Ok((value, vars.gradients(&mut tape)))
}

/// One forward, backward and Adam update. `step` is 1-based.
pub fn train_step<F: Float>(
    w: &mut ModelWeights<F>,
    batch: &BatchPair,
    opt: &mut AdamState<F>,
    step: u64,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let dropout_rng = (w.config.dropout > 0.0).then_some(rng);
    let (loss, grads) = compute_gradients(w, batch, cfg.label_smoothing, dropout_rng)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let lr = lr_at(step, cfg.warmup_steps, cfg.base_lr, w.config.d_model);
    opt.update(w, &grads, lr, cfg);
    Ok(loss)
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
    /// Checkpoint ring at the end of training, oldest first.
    pub checkpoints: Vec<PathBuf>,
}

/// Where and how a run writes checkpoints.
pub struct CheckpointSink<'p> {
    pub dir: &'p Path,
    pub provenance: Provenance,
}

/// Trains for `cfg.total_steps` over repeated epochs of seed-shuffled batches.
pub fn train<F: Float>(
    w: &mut ModelWeights<F>,
    corpus: &EncodedCorpus,
    cfg: &TrainConfig,
    sink: Option<CheckpointSink<'_>>,
    mut on_step: impl FnMut(u64, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut opt = AdamState::new(w);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    if let Some(s) = &sink {
        fs::create_dir_all(s.dir).map_err(|e| Error::io(s.dir, e))?;
    }
    let mut step = 0u64;
    let mut epoch = 0u64;
    'outer: while step < cfg.total_steps {
        let batches = make_batches(
            corpus,
            cfg.batch_size_tokens,
            w.config.max_positions,
            cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch),
        )?;
        for batch in &batches {
            step += 1;
            let loss = train_step(w, batch, &mut opt, step, cfg, &mut rng)?;
            report.losses.push(loss);
            on_step(step, loss);
            let periodic = cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every);
            if let Some(s) = &sink {
                if periodic || step == cfg.total_steps {
                    let path = s.dir.join(checkpoint_name(step));
                    Checkpoint::from_weights(w, step)
                        .with_provenance(s.provenance.clone())
                        .save(&path)?;
                    report.checkpoints.push(path);
                    while report.checkpoints.len() > cfg.keep_last {
                        let old = report.checkpoints.remove(0);
                        fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
                    }
                }
            }
            if step >= cfg.total_steps {
                break 'outer;
            }
        }
        epoch += 1;
    }
    Ok(report)
}
