use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tokenize_13a;
use crate::error::{NmtError, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// Percentage in `[0, 100]`.
    pub bleu: f64,
    /// Modified n-gram precisions as fractions, after any smoothing substitution.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub smoothed: bool,
}

/// Sufficient statistics of a corpus: lengths plus clipped matches and
/// hypothesis n-gram totals per order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
}

impl BleuStats {
    pub fn add(&mut self, other: &BleuStats) {
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in tokens.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Statistics of one tokenized sentence pair.
pub fn sentence_stats(hyp: &[String], reference: &[String]) -> BleuStats {
    let mut s = BleuStats {
        hyp_len: hyp.len(),
        ref_len: reference.len(),
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    }
    s
}

/// BLEU from aggregated statistics.
///
/// Without any match the score is 0. An order with no hypothesis n-grams
/// leaves its precision (and every higher one) at 0. With `smoothed`, the
/// k-th order whose match count is zero gets precision `1 / (2^k · total)`;
/// otherwise a single zero precision makes the score 0.
pub fn bleu_from_stats(s: &BleuStats, smoothed: bool) -> BleuScore {
    let brevity_penalty = if s.hyp_len >= s.ref_len {
        1.0
    } else if s.hyp_len == 0 {
        0.0
    } else {
        (1.0 - s.ref_len as f64 / s.hyp_len as f64).exp()
    };
    let mut precisions = [0.0; MAX_ORDER];
    let score = |precisions: [f64; MAX_ORDER]| BleuScore {
        bleu: if precisions.contains(&0.0) {
            0.0
        } else {
            100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64).exp()
        },
        precisions,
        brevity_penalty,
        hyp_len: s.hyp_len,
        ref_len: s.ref_len,
        smoothed,
    };
    if s.matches.iter().all(|&m| m == 0) {
        return score(precisions);
    }
    let mut halvings = 1.0;
    #[allow(clippy::needless_range_loop)]
    for n in 0..MAX_ORDER {
        if s.totals[n] == 0 {
            break;
        }
        if s.matches[n] == 0 {
            if smoothed {
                halvings *= 2.0;
                precisions[n] = 1.0 / (halvings * s.totals[n] as f64);
            }
        } else {
            precisions[n] = s.matches[n] as f64 / s.totals[n] as f64;
        }
    }
    score(precisions)
}

/// Corpus-level BLEU with one reference per hypothesis, both sides
/// tokenized with [`tokenize_13a`].
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R], smoothed: bool) -> Result<BleuScore> {
    Ok(bleu_from_stats(&corpus_stats(hyps, refs)?, smoothed))
}

pub fn corpus_stats<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuStats> {
    if hyps.len() != refs.len() {
        return Err(NmtError::Input(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(NmtError::Input("BLEU needs at least one sentence pair".into()));
    }
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&sentence_stats(&tokenize_13a(h.as_ref()), &tokenize_13a(r.as_ref())));
    }
    if total.hyp_len == 0 {
        log::warn!("every hypothesis is empty; BLEU is 0");
    }
    Ok(total)
}
