//! Parallel corpus ingestion and hygiene.
//!
//! Two on-disk layouts are supported: Moses style (two line-aligned files)
//! and TSV (`source<TAB>target` per line). Both are strict UTF-8; LF and CRLF
//! line endings are accepted on input and LF is always written.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NmtError, Result};

/// One aligned source/target sentence pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: usize,
    pub source: String,
    pub target: String,
}

impl SentencePair {
    /// Builds a pair from already trimmed text, enforcing the pair invariants.
    pub fn new(id: usize, source: impl Into<String>, target: impl Into<String>) -> Result<Self> {
        let source = source.into();
        let target = target.into();
        for (side, text) in [("source", &source), ("target", &target)] {
            if text.trim().is_empty() {
                return Err(NmtError::Input(format!("pair {id}: empty {side} side")));
            }
            if text.contains(['\n', '\r']) {
                return Err(NmtError::Input(format!(
                    "pair {id}: {side} side contains a line break"
                )));
            }
        }
        Ok(SentencePair { id, source, target })
    }
}

/// An ordered, immutable collection of sentence pairs with consecutive ids.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub name: String,
    pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    /// Builds a corpus from (source, target) texts, assigning ids 0.. in order.
    pub fn from_texts<S, T>(name: impl Into<String>, texts: impl IntoIterator<Item = (S, T)>) -> Result<Self>
    where
        S: Into<String>,
        T: Into<String>,
    {
        let pairs = texts
            .into_iter()
            .enumerate()
            .map(|(id, (s, t))| SentencePair::new(id, s, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParallelCorpus {
            name: name.into(),
            pairs,
        })
    }

    /// Re-numbers `pairs` consecutively; used whenever a stage selects a subset.
    pub fn renumbered(name: impl Into<String>, pairs: impl IntoIterator<Item = SentencePair>) -> Self {
        let pairs = pairs
            .into_iter()
            .enumerate()
            .map(|(id, p)| SentencePair { id, ..p })
            .collect();
        ParallelCorpus {
            name: name.into(),
            pairs,
        }
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.source.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.target.as_str())
    }
}

/// Side information from a load: how many blank-on-either-side lines were dropped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub dropped_blank: usize,
}

/// Reads a UTF-8 file and splits it into lines, stripping a trailing CR per line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| NmtError::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| NmtError::Encoding {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })?;
    Ok(split_lines(&text))
}

fn split_lines(text: &str) -> Vec<String> {
    if text.is_empty() {
        return Vec::new();
    }
    let body = text.strip_suffix('\n').unwrap_or(text);
    body.split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect()
}

fn assemble<'a>(
    name: &str,
    rows: impl Iterator<Item = (&'a str, &'a str)>,
) -> Result<(ParallelCorpus, LoadReport)> {
    let mut pairs = Vec::new();
    let mut report = LoadReport::default();
    for (src, tgt) in rows {
        let (src, tgt) = (src.trim(), tgt.trim());
        if src.is_empty() || tgt.is_empty() {
            report.dropped_blank += 1;
            continue;
        }
        pairs.push(SentencePair::new(pairs.len(), src, tgt)?);
    }
    if report.dropped_blank > 0 {
        log::warn!("{name}: dropped {} blank pair(s)", report.dropped_blank);
    }
    Ok((
        ParallelCorpus {
            name: name.to_string(),
            pairs,
        },
        report,
    ))
}

fn corpus_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads a Moses-style corpus: line `i` of each file forms pair `i`.
pub fn load_moses(source_path: &Path, target_path: &Path) -> Result<(ParallelCorpus, LoadReport)> {
    let src = read_lines(source_path)?;
    let tgt = read_lines(target_path)?;
    if src.len() != tgt.len() {
        return Err(NmtError::Alignment {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    assemble(
        &corpus_name(source_path),
        src.iter().map(String::as_str).zip(tgt.iter().map(String::as_str)),
    )
}

/// Loads a `source<TAB>target` file. Blank lines are skipped silently.
pub fn load_tsv(path: &Path) -> Result<(ParallelCorpus, LoadReport)> {
    let lines = read_lines(path)?;
    let mut rows = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tabs = line.matches('\t').count();
        if tabs != 1 {
            return Err(NmtError::Format {
                line: i + 1,
                message: format!("expected exactly one tab, found {tabs}"),
            });
        }
        let (s, t) = line.split_once('\t').expect("one tab");
        rows.push((s, t));
    }
    assemble(&corpus_name(path), rows.into_iter())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| NmtError::io(path, e))
}

fn join_lines<'a>(lines: impl Iterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    out
}

/// Writes the corpus as two LF-terminated line-aligned files.
pub fn write_moses(corpus: &ParallelCorpus, source_path: &Path, target_path: &Path) -> Result<()> {
    write_text(source_path, &join_lines(corpus.sources()))?;
    write_text(target_path, &join_lines(corpus.targets()))
}

pub fn write_tsv(corpus: &ParallelCorpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    for p in corpus.pairs() {
        out.push_str(&p.source);
        out.push('\t');
        out.push_str(&p.target);
        out.push('\n');
    }
    write_text(path, &out)
}

/// Keeps the first occurrence of each exact (source, target) pair.
pub fn dedup(corpus: &ParallelCorpus) -> ParallelCorpus {
    let mut seen: HashSet<(&str, &str)> = HashSet::with_capacity(corpus.len());
    let kept: Vec<SentencePair> = corpus
        .pairs
        .iter()
        .filter(|p| seen.insert((p.source.as_str(), p.target.as_str())))
        .cloned()
        .collect();
    ParallelCorpus::renumbered(corpus.name.clone(), kept)
}

/// Seeded random train/validation split.
///
/// The validation side receives `round(valid_fraction * n)` pairs, at least
/// one and at most `n - 1`. Both halves keep the original relative order.
pub fn split(
    corpus: &ParallelCorpus,
    valid_fraction: f64,
    seed: u64,
) -> Result<(ParallelCorpus, ParallelCorpus)> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(NmtError::Config(format!(
            "valid fraction must lie in (0, 1), got {valid_fraction}"
        )));
    }
    let n = corpus.len();
    if n < 2 {
        return Err(NmtError::Input(format!(
            "cannot split a corpus of {n} pair(s); need at least 2"
        )));
    }
    let valid_n = ((valid_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_valid = vec![false; n];
    for &i in &order[..valid_n] {
        is_valid[i] = true;
    }
    let (valid, train): (Vec<_>, Vec<_>) = corpus
        .pairs
        .iter()
        .cloned()
        .partition(|p| is_valid[p.id]);
    Ok((
        ParallelCorpus::renumbered(format!("{}.train", corpus.name), train),
        ParallelCorpus::renumbered(format!("{}.valid", corpus.name), valid),
    ))
}

/// Number of maximal whitespace-separated tokens.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pair_count: usize,
    pub source_word_histogram: BTreeMap<usize, usize>,
    pub target_word_histogram: BTreeMap<usize, usize>,
    pub source_mean_words: f64,
    pub target_mean_words: f64,
    pub source_max_words: usize,
    pub target_max_words: usize,
}

pub fn stats(corpus: &ParallelCorpus) -> CorpusStats {
    let mut s = CorpusStats {
        pair_count: corpus.len(),
        ..Default::default()
    };
    let (mut src_total, mut tgt_total) = (0usize, 0usize);
    for p in corpus.pairs() {
        let (a, b) = (word_count(&p.source), word_count(&p.target));
        *s.source_word_histogram.entry(a).or_default() += 1;
        *s.target_word_histogram.entry(b).or_default() += 1;
        src_total += a;
        tgt_total += b;
        s.source_max_words = s.source_max_words.max(a);
        s.target_max_words = s.target_max_words.max(b);
    }
    if s.pair_count > 0 {
        s.source_mean_words = src_total as f64 / s.pair_count as f64;
        s.target_mean_words = tgt_total as f64 / s.pair_count as f64;
    }
    s
}
