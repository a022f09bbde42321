//! Corpus BLEU (raw and smoothed), word-count error, length buckets and
//! comparison reports.

mod bleu;
mod report;
mod tokenize;

pub use bleu::{bleu_from_stats, corpus_bleu, corpus_stats, sentence_stats, BleuScore, BleuStats, MAX_ORDER};
pub use report::{build_report, render_report, BleuCell, BucketCounts, EvalReport, ReportFormat, SystemReport};
pub use tokenize::tokenize_13a;

use serde::{Deserialize, Serialize};

use crate::corpus::word_count;
use crate::error::{NmtError, Result};
use crate::wordpiece::CONTINUATION_PREFIX;

/// Which side's word count decides the bucket of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BucketSide {
    #[default]
    Source,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Pairs with fewer words than this are "small"; the rest are "large".
    pub bucket_threshold: usize,
    pub bucket_side: BucketSide,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bucket_threshold: 15,
            bucket_side: BucketSide::Source,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bucket_threshold == 0 {
            return Err(NmtError::Config("bucket_threshold must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_aligned(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(NmtError::Input(format!("{what}: {a} lines but {b} references")));
    }
    Ok(())
}

/// Mean absolute and root-mean-square difference of whitespace word counts.
pub fn wordcount_error<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<(f64, f64)> {
    check_aligned("hypotheses", hyps.len(), refs.len())?;
    if hyps.is_empty() {
        return Err(NmtError::Input("word-count error needs at least one pair".into()));
    }
    let (mut abs, mut sq) = (0.0, 0.0);
    for (h, r) in hyps.iter().zip(refs) {
        let d = (word_count(h.as_ref()) as f64 - word_count(r.as_ref()) as f64).abs();
        abs += d;
        sq += d * d;
    }
    let n = hyps.len() as f64;
    Ok((abs / n, (sq / n).sqrt()))
}

/// Indices of small (`< threshold` words) and large pairs, each ascending.
pub fn bucket_split<S: AsRef<str>, R: AsRef<str>>(
    sources: &[S],
    references: &[R],
    cfg: &EvalConfig,
) -> Result<(Vec<usize>, Vec<usize>)> {
    cfg.validate()?;
    let counts: Vec<usize> = match cfg.bucket_side {
        BucketSide::Source => {
            check_aligned("sources", sources.len(), references.len())?;
            sources.iter().map(|s| word_count(s.as_ref())).collect()
        }
        BucketSide::Reference => references.iter().map(|r| word_count(r.as_ref())).collect(),
    };
    Ok((0..counts.len()).partition(|&i| counts[i] < cfg.bucket_threshold))
}

/// Rejects text that still carries subword continuation markers.
pub fn check_detokenized<S: AsRef<str>>(label: &str, lines: &[S]) -> Result<()> {
    match lines.iter().position(|l| l.as_ref().contains(CONTINUATION_PREFIX)) {
        Some(i) => Err(NmtError::Input(format!(
            "{label}: line {} contains \"{CONTINUATION_PREFIX}\"; evaluate detokenized text only",
            i + 1
        ))),
        None => Ok(()),
    }
}
