use super::TrainConfig;
use crate::error::{NmtError, Result};
use crate::transformer::{ModelConfig, Parameters, Real};

/// Adam moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub first: Parameters<T>,
    pub second: Parameters<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        OptimizerState {
            first: Parameters::zeros(cfg),
            second: Parameters::zeros(cfg),
            step: 0,
        }
    }

    pub fn for_params(params: &Parameters<T>) -> Self {
        OptimizerState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`.
///
/// When `clip_norm > 0` the gradient is first rescaled so its global L2 norm
/// is at most `clip_norm`. Weight decay `λ` is added to the gradient as `λ·w`
/// unless `decoupled_weight_decay` is set, in which case `w ← w − lr·λ·w`.
pub fn adam_step<T: Real>(
    params: &mut Parameters<T>,
    grads: &Parameters<T>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let mut sq_norm = 0.0f64;
    for (name, g) in grads.named_tensors() {
        let mut s = 0.0f64;
        for &x in g.iter() {
            let x = x.to_f64_lossy();
            if !x.is_finite() {
                return Err(NmtError::Numeric(format!("gradient of {name}")));
            }
            s += x * x;
        }
        sq_norm += s;
    }
    let clip = if cfg.clip_norm > 0.0 {
        let norm = sq_norm.sqrt();
        if norm > cfg.clip_norm {
            cfg.clip_norm / (norm + 1e-6)
        } else {
            1.0
        }
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.adam_beta1), T::from_f64_lossy(cfg.adam_beta2));
    let (one, clip) = (T::one(), T::from_f64_lossy(clip));
    let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
    let (lr, eps, wd) = (
        T::from_f64_lossy(lr),
        T::from_f64_lossy(cfg.adam_eps),
        T::from_f64_lossy(cfg.weight_decay),
    );
    let coupled = !cfg.decoupled_weight_decay;

    let tensors = params
        .named_tensors_mut()
        .into_iter()
        .zip(grads.named_tensors())
        .zip(state.first.named_tensors_mut())
        .zip(state.second.named_tensors_mut());
    for ((((_, mut w), (_, g)), (_, mut m)), (_, mut v)) in tensors {
        ndarray::Zip::from(&mut w)
            .and(&g)
            .and(&mut m)
            .and(&mut v)
            .for_each(|w, &g, m, v| {
                let mut g = g * clip;
                if coupled {
                    g += wd * *w;
                }
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                if !coupled {
                    *w -= lr * wd * *w;
                }
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}
