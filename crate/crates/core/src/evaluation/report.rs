use std::collections::BTreeMap;
use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bucket_split, check_aligned, check_detokenized, corpus_bleu, wordcount_error, EvalConfig};
use crate::error::{NmtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuCell {
    /// Smoothed corpus BLEU.
    pub bleu: f64,
    pub raw_bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    /// `None` when the bucket is empty.
    pub small: Option<BleuCell>,
    pub large: Option<BleuCell>,
    pub all: Option<BleuCell>,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub small: usize,
    pub large: usize,
    pub all: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub counts: BucketCounts,
    pub systems: BTreeMap<String, SystemReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

fn cell<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[R], idx: &[usize]) -> Result<Option<BleuCell>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let h: Vec<&str> = idx.iter().map(|&i| hyps[i].as_ref()).collect();
    let r: Vec<&str> = idx.iter().map(|&i| refs[i].as_ref()).collect();
    Ok(Some(BleuCell {
        bleu: corpus_bleu(&h, &r, true)?.bleu,
        raw_bleu: corpus_bleu(&h, &r, false)?.bleu,
    }))
}

/// Scores every system on the small, large and full buckets.
pub fn build_report<H, R, S>(
    systems: &BTreeMap<String, Vec<H>>,
    references: &[R],
    sources: &[S],
    cfg: &EvalConfig,
) -> Result<EvalReport>
where
    H: AsRef<str> + Sync,
    R: AsRef<str> + Sync,
    S: AsRef<str>,
{
    cfg.validate()?;
    let (small, large) = bucket_split(sources, references, cfg)?;
    let all: Vec<usize> = (0..references.len()).collect();
    for (name, hyps) in systems {
        check_aligned(&format!("system {name}"), hyps.len(), references.len())?;
        check_detokenized(&format!("system {name}"), hyps)?;
    }
    if !systems.is_empty() && references.is_empty() {
        return Err(NmtError::Input("no references to score against".into()));
    }
    let rows = systems
        .par_iter()
        .map(|(name, hyps)| {
            let (mae, rmse) = wordcount_error(hyps, references)?;
            let row = SystemReport {
                small: cell(hyps, references, &small)?,
                large: cell(hyps, references, &large)?,
                all: cell(hyps, references, &all)?,
                mae,
                rmse,
            };
            Ok((name.clone(), row))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(EvalReport {
        config: cfg.clone(),
        counts: BucketCounts {
            small: small.len(),
            large: large.len(),
            all: all.len(),
        },
        systems: rows,
    })
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |b| format!("{b:.2}"))
}

/// JSON (full precision, newline-terminated) or a fixed-width text table
/// with one row per system.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Text => {
            let width = report.systems.keys().map(|k| k.chars().count()).max().unwrap_or(0).max(6);
            let mut out = String::new();
            let t = report.config.bucket_threshold;
            let c = &report.counts;
            let _ = writeln!(
                out,
                "buckets: small (< {t} words, n={}) | large (>= {t} words, n={}) | all (n={})",
                c.small, c.large, c.all
            );
            let cols = [
                "small bleu",
                "small raw",
                "large bleu",
                "large raw",
                "all bleu",
                "all raw",
                "mae",
                "rmse",
            ];
            let _ = write!(out, "{:<width$}", "system");
            for col in cols {
                let _ = write!(out, " {col:>10}");
            }
            out.push('\n');
            out.push_str(&"-".repeat(width + 11 * cols.len()));
            out.push('\n');
            for (name, r) in &report.systems {
                let _ = write!(out, "{name:<width$}");
                for b in [r.small, r.large, r.all] {
                    let _ = write!(
                        out,
                        " {:>10} {:>10}",
                        fmt_cell(b.map(|b| b.bleu)),
                        fmt_cell(b.map(|b| b.raw_bleu))
                    );
                }
                let _ = writeln!(out, " {:>10.4} {:>10.4}", r.mae, r.rmse);
            }
            Ok(out)
        }
    }
}
