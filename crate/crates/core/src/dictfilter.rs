//! Dictionary-based bitext quality filter.
//!
//! A pair survives when enough of its translated words are dictionary
//! translations of words in its source sentence. The statistic is
//!
//! ```text
//! T     = ⋃ dict[s]  for every normalized source word s
//! W     = multiset of normalized target words
//! ratio = |{w ∈ W : w ∈ T}| / |W|        (0 when W is empty)
//! ```
//!
//! and a pair is kept iff `ratio >= threshold`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::corpus::{read_lines, ParallelCorpus, SentencePair};
use crate::error::{NmtError, Result};

/// Source word → set of target words. Target words are stored lowercased.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BilingualDictionary {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl BilingualDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one translation. Words are lowercased; whitespace inside a word is rejected.
    pub fn insert(&mut self, source: &str, target: &str) -> Result<()> {
        let (s, t) = (source.trim(), target.trim());
        if s.is_empty() || t.is_empty() {
            return Err(NmtError::Input("dictionary words must be non-empty".into()));
        }
        if s.contains(char::is_whitespace) || t.contains(char::is_whitespace) {
            return Err(NmtError::Input(format!(
                "dictionary words must not contain whitespace: {s:?} / {t:?}"
            )));
        }
        self.entries
            .entry(s.to_lowercase())
            .or_default()
            .insert(t.to_lowercase());
        Ok(())
    }

    /// Number of distinct source words.
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn translations(&self, source_word: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(source_word)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.entries.iter()
    }

    /// The same dictionary with every (source, target) edge reversed.
    pub fn inverted(&self) -> BilingualDictionary {
        let mut out = BilingualDictionary::new();
        for (s, ts) in &self.entries {
            for t in ts {
                out.entries.entry(t.clone()).or_default().insert(s.clone());
            }
        }
        out
    }
}

/// Reads a `source<TAB>target` dictionary, one translation per line.
pub fn load_dictionary(path: &Path) -> Result<BilingualDictionary> {
    let mut dict = BilingualDictionary::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(NmtError::Format {
                line: i + 1,
                message: format!("expected `source<TAB>target`, found {} field(s)", fields.len()),
            });
        }
        dict.insert(fields[0], fields[1]).map_err(|e| NmtError::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(dict)
}

/// Which side supplies the candidate translations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchDirection {
    /// Candidates come from source words, the denominator is the target word count.
    #[default]
    SourceToTarget,
    /// Candidates come from target words through the inverted dictionary.
    TargetToSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub threshold: f64,
    pub strip_punctuation: bool,
    pub direction: MatchDirection,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            threshold: 0.30,
            strip_punctuation: true,
            direction: MatchDirection::SourceToTarget,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(NmtError::Config(format!(
                "filter threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept_count: usize,
    pub rejected_count: usize,
    /// `ratio_histogram[d]` counts pairs with ratio in `[d/10, (d+1)/10)`; ratio 1.0 lands in bucket 9.
    pub ratio_histogram: [usize; 10],
}

impl FilterReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn is_punctuation(c: char) -> bool {
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        ConnectorPunctuation
            | DashPunctuation
            | OpenPunctuation
            | ClosePunctuation
            | InitialPunctuation
            | FinalPunctuation
            | OtherPunctuation
    )
}

/// Lowercases a word and, if requested, trims leading/trailing Unicode punctuation.
pub fn normalize_word(word: &str, strip_punctuation: bool) -> String {
    let w = if strip_punctuation {
        word.trim_matches(is_punctuation)
    } else {
        word
    };
    w.to_lowercase()
}

fn normalized_words(text: &str, strip: bool) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(move |w| normalize_word(w, strip))
        .filter(|w| !w.is_empty())
}

fn ratio_directed(from: &str, to: &str, dict: &BilingualDictionary, strip: bool) -> f64 {
    let mut candidates: HashSet<&str> = HashSet::new();
    for w in normalized_words(from, strip) {
        if let Some(ts) = dict.translations(&w) {
            candidates.extend(ts.iter().map(String::as_str));
        }
    }
    let (mut matched, mut total) = (0usize, 0usize);
    for w in normalized_words(to, strip) {
        total += 1;
        if candidates.contains(w.as_str()) {
            matched += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        matched as f64 / total as f64
    }
}

/// Fraction of target-word occurrences found among the dictionary translations
/// of the pair's source words.
///
/// With [`MatchDirection::TargetToSource`] the roles swap and `dict` is
/// consulted in reverse; callers filtering many pairs should prefer
/// [`filter_corpus`], which inverts the dictionary once.
pub fn match_ratio(pair: &SentencePair, dict: &BilingualDictionary, cfg: &FilterConfig) -> f64 {
    match cfg.direction {
        MatchDirection::SourceToTarget => {
            ratio_directed(&pair.source, &pair.target, dict, cfg.strip_punctuation)
        }
        MatchDirection::TargetToSource => {
            ratio_directed(&pair.target, &pair.source, &dict.inverted(), cfg.strip_punctuation)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub kept: ParallelCorpus,
    pub rejected: ParallelCorpus,
    pub report: FilterReport,
}

fn decile(ratio: f64) -> usize {
    ((ratio * 10.0).floor() as usize).min(9)
}

/// Splits a corpus into pairs meeting the threshold (inclusive) and the rest.
pub fn filter_corpus(
    corpus: &ParallelCorpus,
    dict: &BilingualDictionary,
    cfg: &FilterConfig,
) -> Result<FilterOutput> {
    cfg.validate()?;
    let inverted;
    let (lookup, reverse) = match cfg.direction {
        MatchDirection::SourceToTarget => (dict, false),
        MatchDirection::TargetToSource => {
            inverted = dict.inverted();
            (&inverted, true)
        }
    };
    let ratios: Vec<f64> = corpus
        .pairs()
        .par_iter()
        .map(|p| {
            if reverse {
                ratio_directed(&p.target, &p.source, lookup, cfg.strip_punctuation)
            } else {
                ratio_directed(&p.source, &p.target, lookup, cfg.strip_punctuation)
            }
        })
        .collect();

    let mut report = FilterReport::default();
    let (mut kept, mut rejected) = (Vec::new(), Vec::new());
    for (pair, &r) in corpus.pairs().iter().zip(&ratios) {
        report.ratio_histogram[decile(r)] += 1;
        if r >= cfg.threshold {
            kept.push(pair.clone());
        } else {
            rejected.push(pair.clone());
        }
    }
    report.kept_count = kept.len();
    report.rejected_count = rejected.len();
    Ok(FilterOutput {
        kept: ParallelCorpus::renumbered(format!("{}.kept", corpus.name), kept),
        rejected: ParallelCorpus::renumbered(format!("{}.rejected", corpus.name), rejected),
        report,
    })
}
