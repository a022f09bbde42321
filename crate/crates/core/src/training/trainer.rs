use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    adam_step, checkpoint_file_name, lr_at, make_batches, save_checkpoint, Checkpoint, OptimizerState, PositionLimits,
    TokenPair, TokenizerBundle, TrainConfig, TrainState,
};
use crate::error::{NmtError, Result};
use crate::transformer::{Batch, LossStats, ModelConfig, Parameters, Real, Transformer};

/// One line of the progress log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub updates: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub valid_ppl: f64,
}

/// Summed statistics of one optimizer update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub lr: f64,
    pub loss: f64,
    pub nll: f64,
    pub tokens: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    state: &'a TrainState,
    parameters: usize,
    skipped_train_pairs: usize,
    skipped_valid_pairs: usize,
    stop_reason: &'a str,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Summed gradient of every micro-batch divided by their total target-token
/// count, plus the summed loss statistics. Dropout in micro-batch `i` of
/// update `step` is seeded from `(cfg.seed, step, i)`.
pub fn accumulate_gradients<T: Real>(
    model: &Transformer<T>,
    micro_batches: &[Batch],
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Parameters<T>, LossStats)> {
    if micro_batches.is_empty() {
        return Err(NmtError::Input("an update needs at least one batch".into()));
    }
    let mut total = LossStats::default();
    let mut grads: Option<Parameters<T>> = None;
    for (i, b) in micro_batches.iter().enumerate() {
        let seed = mix(cfg.seed, step, i as u64);
        let lg = model.loss_and_grad(b, cfg.label_smoothing, true, seed)?;
        if !lg.stats.loss.is_finite() {
            return Err(NmtError::Numeric(format!("loss of micro-batch {i} in update {step}")));
        }
        total.loss += lg.stats.loss;
        total.nll += lg.stats.nll;
        total.tokens += lg.stats.tokens;
        match grads.as_mut() {
            None => grads = Some(lg.grads),
            Some(g) => g.add_scaled(&lg.grads, T::one()),
        }
    }
    let mut grads = grads.expect("at least one micro-batch");
    if total.tokens > 0 {
        grads.scale(T::from_f64_lossy(1.0 / total.tokens as f64));
    }
    Ok((grads, total))
}

/// Owns the model, optimizer state and progress of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Transformer<f32>,
    pub opt: OptimizerState<f32>,
    pub cfg: TrainConfig,
    pub state: TrainState,
    pub tokenizers: Option<TokenizerBundle>,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Transformer::new(model_cfg, cfg.seed)?;
        let opt = OptimizerState::for_params(&model.params);
        Ok(Trainer {
            model,
            opt,
            cfg,
            state: TrainState::default(),
            tokenizers: None,
        })
    }

    /// Resumes from a checkpoint. Adam moments are not stored and restart from zero.
    pub fn from_checkpoint(ckpt: Checkpoint, cfg: Option<TrainConfig>) -> Result<Self> {
        let cfg = cfg.unwrap_or(ckpt.train);
        cfg.validate()?;
        let model = Transformer::from_parts(ckpt.model, ckpt.params)?;
        let opt = OptimizerState::for_params(&model.params);
        Ok(Trainer {
            model,
            opt,
            cfg,
            state: ckpt.state,
            tokenizers: ckpt.tokenizers,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.cfg.clone(),
            train: self.cfg.clone(),
            state: self.state.clone(),
            params: self.model.params.clone(),
            tokenizers: self.tokenizers.clone(),
        }
    }

    /// One optimizer update over accumulated micro-batches.
    ///
    /// Gradients are summed over all micro-batches and divided by the total
    /// number of target tokens before the Adam step.
    pub fn update(&mut self, micro_batches: &[Batch]) -> Result<UpdateStats> {
        let step = self.state.updates + 1;
        let (grads, total) = accumulate_gradients(&self.model, micro_batches, &self.cfg, step)?;
        let lr = lr_at(step, &self.cfg)?;
        adam_step(&mut self.model.params, &grads, &mut self.opt, &self.cfg, lr)?;
        self.state.updates = step;
        Ok(UpdateStats {
            lr,
            loss: total.loss,
            nll: total.nll,
            tokens: total.tokens,
        })
    }

    /// Summed eval-mode loss over `batches`.
    pub fn evaluate(&self, batches: &[Batch]) -> Result<LossStats> {
        let mut total = LossStats::default();
        for b in batches {
            let s = self.model.loss(b, self.cfg.label_smoothing, false, 0)?;
            total.loss += s.loss;
            total.nll += s.nll;
            total.tokens += s.tokens;
        }
        Ok(total)
    }

    fn updates_exhausted(&self) -> bool {
        self.cfg.max_updates.is_some_and(|m| self.state.updates >= m)
    }

    /// Runs epochs until the perplexity threshold, `max_epochs` or
    /// `max_updates` is reached.
    ///
    /// Validation perplexity is `exp` of the mean per-token negative
    /// log-likelihood; with an empty validation set the training NLL of the
    /// epoch is used instead. When `checkpoint_dir` is given, each epoch writes
    /// `checkpoint{epoch}.pt` there and the run ends with `training_summary.json`.
    pub fn train(
        &mut self,
        train: &[TokenPair],
        valid: &[TokenPair],
        checkpoint_dir: Option<&Path>,
        log: &mut dyn Write,
    ) -> Result<TrainState> {
        self.cfg.validate()?;
        let limits = PositionLimits::from(&self.model.cfg);
        let valid_plan = make_batches(valid, self.cfg.max_tokens, limits, self.cfg.seed, 0);
        let mut skipped_train = 0;
        let mut stop_reason = "max_epochs";

        while self.state.epoch < self.cfg.max_epochs {
            if self.updates_exhausted() {
                stop_reason = "max_updates";
                break;
            }
            let epoch = self.state.epoch + 1;
            let plan = make_batches(train, self.cfg.max_tokens, limits, self.cfg.seed, epoch as u64);
            skipped_train = plan.skipped.len();
            if plan.batches.is_empty() {
                return Err(NmtError::Input("no training pair fits the model's position limits".into()));
            }

            let mut epoch_stats = LossStats::default();
            let mut lr = 0.0;
            for (c, chunk) in plan.batches.chunks(self.cfg.update_freq).enumerate() {
                if self.updates_exhausted() {
                    break;
                }
                let s = self.update(chunk).map_err(|e| match e {
                    NmtError::Numeric(m) => NmtError::Numeric(format!(
                        "{m} (batch {} of epoch {epoch})",
                        c * self.cfg.update_freq
                    )),
                    other => other,
                })?;
                lr = s.lr;
                epoch_stats.loss += s.loss;
                epoch_stats.nll += s.nll;
                epoch_stats.tokens += s.tokens;
            }

            let per_token = |x: f64, n: usize| if n > 0 { x / n as f64 } else { f64::NAN };
            let train_loss = per_token(epoch_stats.loss, epoch_stats.tokens);
            let valid_stats = self.evaluate(&valid_plan.batches)?;
            let (valid_loss, valid_nll, ppl) = if valid_stats.tokens > 0 {
                let nll = per_token(valid_stats.nll, valid_stats.tokens);
                (Some(per_token(valid_stats.loss, valid_stats.tokens)), Some(nll), nll.exp())
            } else {
                (None, None, per_token(epoch_stats.nll, epoch_stats.tokens).exp())
            };

            self.state.epoch = epoch;
            self.state.train_loss = Some(train_loss);
            self.state.valid_loss = valid_loss;
            self.state.valid_nll = valid_nll;
            self.state.valid_ppl = Some(ppl);
            let record = EpochRecord {
                epoch,
                updates: self.state.updates,
                lr,
                train_loss,
                valid_loss,
                valid_ppl: ppl,
            };
            writeln!(
                log,
                "epoch {:>3} | updates {:>6} | lr {:.4e} | train_loss {:.4} | valid_loss {} | valid_ppl {:.4}",
                record.epoch,
                record.updates,
                record.lr,
                record.train_loss,
                record.valid_loss.map_or("n/a".to_string(), |v| format!("{v:.4}")),
                record.valid_ppl
            )
            .map_err(|e| NmtError::io("<training log>", e))?;
            self.state.history.push(record);

            if let Some(dir) = checkpoint_dir {
                save_checkpoint(&self.checkpoint(), &dir.join(checkpoint_file_name(epoch)))?;
            }
            if self.cfg.stop_threshold().is_some_and(|t| ppl < t) {
                stop_reason = "stop_ppl";
                break;
            }
            if self.updates_exhausted() {
                stop_reason = "max_updates";
                break;
            }
        }

        if let Some(dir) = checkpoint_dir {
            let summary = Summary {
                state: &self.state,
                parameters: self.model.params.num_parameters(),
                skipped_train_pairs: skipped_train,
                skipped_valid_pairs: valid_plan.skipped.len(),
                stop_reason,
            };
            let path = dir.join("training_summary.json");
            let mut json = serde_json::to_string_pretty(&summary)?;
            json.push('\n');
            std::fs::write(&path, json).map_err(|e| NmtError::io(&path, e))?;
        }
        Ok(self.state.clone())
    }
}
