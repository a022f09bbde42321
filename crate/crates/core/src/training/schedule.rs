use super::TrainConfig;
use crate::error::{NmtError, Result};

/// Inverse-square-root schedule with linear warmup from zero.
///
/// ```text
/// step ≤ warmup : peak · step / warmup
/// step > warmup : peak · sqrt(warmup / step)
/// ```
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step == 0 {
        return Err(NmtError::Range("learning-rate step counts from 1".into()));
    }
    let warmup = cfg.warmup_updates.max(1) as f64;
    let step = step as f64;
    Ok(if step <= warmup {
        cfg.peak_lr * (step / warmup)
    } else {
        cfg.peak_lr * (warmup / step).sqrt()
    })
}
