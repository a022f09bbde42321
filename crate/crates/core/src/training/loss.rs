//! Label-smoothed cross-entropy.
//!
//! For a non-pad position with gold class `y`, `V` classes and `p = softmax(logits)`:
//!
//! ```text
//! loss = −(1−ε)·log p(y) − ε/(V−1) · Σ_{k≠y} log p(k)
//! ```
//!
//! Pad positions contribute nothing and are not counted. The gradient with
//! respect to the logits is `p − q`, where `q` is the smoothed target.

use ndarray::{Array2, ArrayView2};

use crate::transformer::Real;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CeStats {
    /// Summed smoothed loss in nats.
    pub loss: f64,
    /// Summed negative log-likelihood of the gold tokens in nats.
    pub nll: f64,
    /// Non-pad positions scored.
    pub tokens: usize,
}

fn log_softmax_row<T: Real>(row: ndarray::ArrayView1<'_, T>) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.to_f64_lossy()));
    let lse = max + row.iter().map(|&x| (x.to_f64_lossy() - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x.to_f64_lossy() - lse).collect()
}

/// Summed loss and token count over `rows × V` logits.
pub fn label_smoothed_ce<T: Real>(
    logits: ArrayView2<'_, T>,
    targets: &[u32],
    epsilon: f64,
    pad_id: u32,
) -> (f64, usize) {
    let s = smoothed_ce_impl(logits, targets, epsilon, pad_id, None);
    (s.loss, s.tokens)
}

/// Same as [`label_smoothed_ce`] but also returns NLL and `dloss/dlogits`.
pub(crate) fn label_smoothed_ce_grad<T: Real>(
    logits: ArrayView2<'_, T>,
    targets: &[u32],
    epsilon: f64,
    pad_id: u32,
) -> (CeStats, Array2<T>) {
    let mut grad = Array2::zeros(logits.raw_dim());
    let s = smoothed_ce_impl(logits, targets, epsilon, pad_id, Some(&mut grad));
    (s, grad)
}

pub(crate) fn smoothed_ce_impl<T: Real>(
    logits: ArrayView2<'_, T>,
    targets: &[u32],
    epsilon: f64,
    pad_id: u32,
    mut grad: Option<&mut Array2<T>>,
) -> CeStats {
    assert_eq!(logits.nrows(), targets.len(), "one target per logit row");
    let v = logits.ncols();
    let off = if v > 1 { epsilon / (v - 1) as f64 } else { 0.0 };
    let mut stats = CeStats::default();
    for (r, (row, &y)) in logits.rows().into_iter().zip(targets).enumerate() {
        if y == pad_id {
            continue;
        }
        let y = y as usize;
        let lp = log_softmax_row(row);
        let total: f64 = lp.iter().sum();
        let nll = -lp[y];
        stats.loss += (1.0 - epsilon) * nll - off * (total - lp[y]);
        stats.nll += nll;
        stats.tokens += 1;
        if let Some(g) = grad.as_deref_mut() {
            for (k, gk) in g.row_mut(r).iter_mut().enumerate() {
                let q = if k == y { 1.0 - epsilon } else { off };
                *gk = T::from_f64_lossy(lp[k].exp() - q);
            }
        }
    }
    stats
}
