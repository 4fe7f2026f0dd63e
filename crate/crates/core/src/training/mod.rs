//! Optimization loop, learning-rate schedule, checkpoints, metrics and
//! evaluation.

mod bleu;

pub use bleu::{corpus_bleu, token_accuracy};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::sample_perturbation_spec;
use crate::corpus::{load_examples, make_batches, Batch, Example, EOS};
use crate::error::{invalid, Result};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::objectives::LossReport;
use crate::substrate::derive_seed;

pub use crate::model::TrainState;

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.bin";

/// Linear warm-up then inverse square-root decay:
/// `base_lr · min(step/warmup, sqrt(warmup/step))`, for `step ≥ 1`.
pub fn lr_at(step: u64, base_lr: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    base_lr * (s / w).min((w / s).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup: u64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Write `ckpt_<step>.bin` every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            base_lr: 2e-3,
            warmup: 200,
            clip_norm: 1.0,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub q_likelihood: Option<f64>,
    #[serde(flatten)]
    pub losses: LossReport,
}

pub struct Trainer {
    pub model: Model,
    pub state: TrainState,
    pub cfg: TrainConfig,
    examples: Vec<Example>,
    epoch_cache: Option<(u64, Vec<Batch>)>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, examples: Vec<Example>) -> Result<Self> {
        Self::with_state(model, TrainState::default(), cfg, examples)
    }

    pub fn with_state(model: Model, state: TrainState, cfg: TrainConfig, examples: Vec<Example>) -> Result<Self> {
        if examples.is_empty() {
            return invalid("training corpus is empty");
        }
        if cfg.batch_size == 0 {
            return invalid("batch size must be at least 1");
        }
        Ok(Self {
            model,
            state,
            cfg,
            examples,
            epoch_cache: None,
        })
    }

    /// Continues from a checkpoint written by [`save_checkpoint`].
    pub fn resume(path: impl AsRef<Path>, cfg: TrainConfig, examples: Vec<Example>) -> Result<Self> {
        let (model, state) = load_checkpoint(path)?;
        Self::with_state(model, state, cfg, examples)
    }

    fn batches_per_epoch(&self) -> u64 {
        self.examples.len().div_ceil(self.cfg.batch_size) as u64
    }

    /// The batch consumed by step `index` (0-based), with its sampled
    /// perturbations. Depends only on the seed and `index`.
    pub fn batch_for(&mut self, index: u64) -> Result<Batch> {
        let per_epoch = self.batches_per_epoch();
        let epoch = index / per_epoch;
        if self.epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let seed = derive_seed(self.cfg.seed, &[epoch, 1]);
            let batches = make_batches(&self.examples, self.cfg.batch_size, self.model.cfg.mode, seed)?;
            self.epoch_cache = Some((epoch, batches));
        }
        let mut batch = self.epoch_cache.as_ref().unwrap().1[(index % per_epoch) as usize].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[index, 2]));
        for p in &mut batch.perturbations {
            *p = sample_perturbation_spec(&mut rng);
        }
        Ok(batch)
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<StepLog> {
        let index = self.state.step;
        let batch = self.batch_for(index)?;
        let out = self.model.training_step(&batch, derive_seed(self.cfg.seed, &[index, 3]))?;
        let mut grads = out.grads;
        let grad_norm = grads.global_norm(&self.model.store);
        if self.cfg.clip_norm > 0.0 && grad_norm > self.cfg.clip_norm {
            grads.scale(self.cfg.clip_norm / grad_norm);
        }
        let step = index + 1;
        let lr = lr_at(step, self.cfg.base_lr, self.cfg.warmup);
        self.state.opt.step(&mut self.model.store, &grads, lr);
        self.state.step = step;
        let total = out.report.total;
        if self.state.best_metric.is_none_or(|b| total < b) {
            self.state.best_metric = Some(total);
        }
        Ok(StepLog {
            step,
            lr,
            grad_norm,
            q_likelihood: out.q_likelihood,
            losses: out.report,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.model, &self.state)
    }

    /// Steps until `state.step == until`. With `out_dir`, appends to the
    /// metrics log, writes periodic checkpoints and always writes
    /// `final.bin`.
    pub fn run(&mut self, until: u64, out_dir: Option<&Path>) -> Result<Vec<StepLog>> {
        let mut log_file = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(OpenOptions::new().create(true).append(true).open(dir.join(METRICS_LOG))?)
            }
            None => None,
        };
        let mut logs = Vec::new();
        while self.state.step < until {
            let entry = self.step()?;
            if entry.step % 50 == 0 || entry.step == until {
                log::info!(
                    "step {} lr {:.2e} total {:.4} st {:.4} mt {:.4} mi {:.4}",
                    entry.step,
                    entry.lr,
                    entry.losses.total,
                    entry.losses.st,
                    entry.losses.mt,
                    entry.losses.mi
                );
            }
            if let Some(f) = log_file.as_mut() {
                serde_json::to_writer(&mut *f, &entry)?;
                f.write_all(b"\n")?;
            }
            if let Some(dir) = out_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && entry.step % every == 0 {
                    self.save(dir.join(format!("ckpt_{:06}.bin", entry.step)))?;
                }
            }
            logs.push(entry);
        }
        if let Some(dir) = out_dir {
            self.save(dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(logs)
    }
}

/// Result of [`run_training`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub logs: Vec<StepLog>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Fresh model from `model_cfg`, trained for `n_steps` steps.
pub fn run_training(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    examples: Vec<Example>,
    n_steps: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(Model::new(model_cfg)?, train_cfg, examples)?;
    let logs = trainer.run(n_steps, out_dir)?;
    Ok(TrainOutcome {
        trainer,
        logs,
        final_checkpoint: out_dir.map(|d| d.join(FINAL_CHECKPOINT)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_utts: usize,
    pub token_accuracy: f64,
    pub corpus_bleu: f64,
    /// Decoded hypotheses without EOS, in input order.
    pub hypotheses: Vec<Vec<usize>>,
}

/// Hypothesis with a trailing EOS removed.
pub fn strip_eos(mut tokens: Vec<usize>) -> Vec<usize> {
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    tokens
}

/// Decodes every example and scores it against its target.
pub fn evaluate(model: &Model, examples: &[Example], beam: usize, max_len: usize) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return invalid("nothing to evaluate");
    }
    let hyps = examples
        .iter()
        .map(|e| model.translate(&e.waveform, beam, max_len).map(strip_eos))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.tgt.clone()).collect();
    Ok(EvalMetrics {
        n_utts: examples.len(),
        token_accuracy: token_accuracy(&hyps, &refs),
        corpus_bleu: corpus_bleu(&hyps, &refs),
        hypotheses: hyps,
    })
}

/// [`evaluate`] on a checkpoint and a manifest.
pub fn evaluate_checkpoint(
    checkpoint: impl AsRef<Path>,
    manifest: impl AsRef<Path>,
    beam: usize,
    max_len: usize,
) -> Result<EvalMetrics> {
    let (model, _) = load_checkpoint(checkpoint)?;
    evaluate(&model, &load_examples(manifest)?, beam, max_len)
}

/// Reads a metrics log back.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepLog>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
