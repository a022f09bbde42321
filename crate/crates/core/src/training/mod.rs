//! Training: loss, optimizer, learning-rate schedule, batching, checkpoints
//! and the epoch loop that ties them together.

mod adam;
mod batching;
mod checkpoint;
pub mod loss;
mod schedule;
mod trainer;

pub use adam::{adam_step, OptimizerState};
pub use batching::{make_batches, BatchPlan, PositionLimits, TokenPair};
pub use checkpoint::{
    checkpoint_file_name, decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    Checkpoint, TokenizerBundle,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use loss::label_smoothed_ce;
pub use schedule::lr_at;
pub use trainer::{accumulate_gradients, EpochRecord, Trainer, UpdateStats};

use serde::{Deserialize, Serialize};

use crate::error::{NmtError, Result};

/// Optimization hyperparameters. Defaults reproduce the reference training command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; `0.0` disables clipping.
    pub clip_norm: f64,
    pub warmup_updates: u64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights instead of through the gradient.
    pub decoupled_weight_decay: bool,
    pub max_tokens: usize,
    pub update_freq: usize,
    /// Stop once validation perplexity falls below this; `None` disables the rule.
    pub stop_ppl: Option<f64>,
    pub max_epochs: usize,
    /// Optional hard cap on optimizer updates.
    pub max_updates: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            clip_norm: 0.0,
            warmup_updates: 10_000,
            label_smoothing: 0.1,
            weight_decay: 0.0001,
            decoupled_weight_decay: false,
            max_tokens: 4096,
            update_freq: 2,
            stop_ppl: Some(3.0),
            max_epochs: 100,
            max_updates: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the short warmup suited to small corpora.
    pub fn desk_scale() -> Self {
        TrainConfig {
            warmup_updates: 400,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NmtError::Config(m));
        let positive = [
            ("peak_lr", self.peak_lr),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if self.clip_norm < 0.0 || self.weight_decay < 0.0 {
            return fail("clip_norm and weight_decay must be non-negative".into());
        }
        if self.warmup_updates == 0 {
            return fail("warmup_updates must be at least 1".into());
        }
        if self.update_freq == 0 || self.max_tokens == 0 || self.max_epochs == 0 {
            return fail("update_freq, max_tokens and max_epochs must be at least 1".into());
        }
        Ok(())
    }

    /// The active perplexity threshold, if any (non-finite values disable it).
    pub fn stop_threshold(&self) -> Option<f64> {
        self.stop_ppl.filter(|p| p.is_finite())
    }
}

/// Progress of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub updates: u64,
    /// Smoothed training loss per target token over the last epoch.
    pub train_loss: Option<f64>,
    /// Smoothed validation loss per target token.
    pub valid_loss: Option<f64>,
    /// Validation negative log-likelihood per target token.
    pub valid_nll: Option<f64>,
    /// `exp(valid_nll)`.
    pub valid_ppl: Option<f64>,
    pub history: Vec<EpochRecord>,
}
