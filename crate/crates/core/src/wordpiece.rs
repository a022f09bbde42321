//! WordPiece vocabulary training, encoding and detokenization.
//!
//! Non-initial pieces carry the `##` continuation prefix. Ids 0..=3 are
//! always `[PAD] [UNK] [BOS] [EOS]`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::read_lines;
use crate::error::{NmtError, Result};
use crate::special;

pub const CONTINUATION_PREFIX: &str = "##";

/// Closing punctuation re-attached to the previous token by [`detokenize`].
const CLOSING_PUNCT: [char; 6] = ['.', ',', '!', '?', ';', ':'];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub vocab_size: usize,
    pub min_frequency: usize,
    pub max_word_chars: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            lowercase: false,
            vocab_size: 4000,
            min_frequency: 2,
            max_word_chars: 100,
        }
    }
}

impl TokenizerConfig {
    /// English side: lowercased.
    pub fn english() -> Self {
        TokenizerConfig {
            lowercase: true,
            ..Default::default()
        }
    }

    /// Marathi side: Devanagari has no case.
    pub fn marathi() -> Self {
        TokenizerConfig::default()
    }
}

/// Dense token inventory. Specials first, then pieces in insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// A vocabulary holding only the four specials.
    pub fn specials_only() -> Self {
        let tokens: Vec<String> = special::ALL.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Builds a vocabulary from a full token list, validating the layout.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < special::COUNT || tokens[..special::COUNT] != special::ALL {
            return Err(NmtError::Format {
                line: 1,
                message: format!("vocabulary must start with {:?}", special::ALL),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let bad = t.is_empty()
                || t.contains(char::is_whitespace)
                || (i >= special::COUNT && t == CONTINUATION_PREFIX);
            if bad {
                return Err(NmtError::Format {
                    line: i + 1,
                    message: format!("invalid token {t:?}"),
                });
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(NmtError::Format {
                    line: i + 1,
                    message: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    fn push(&mut self, token: String) -> bool {
        if self.index.contains_key(&token) {
            return false;
        }
        self.index.insert(token.clone(), self.tokens.len() as u32);
        self.tokens.push(token);
        true
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// One token per line, id = line number.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| NmtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tokens(read_lines(path)?)
    }
}

/// NFC, optional lowercase, whitespace runs collapsed, outer whitespace trimmed.
pub fn normalize(text: &str, cfg: &TokenizerConfig) -> String {
    let nfc: String = text.nfc().collect();
    let cased = if cfg.lowercase { nfc.to_lowercase() } else { nfc };
    cased.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION_PREFIX}{c}")
            }
        })
        .collect()
}

fn merged(a: &str, b: &str) -> String {
    format!("{a}{}", b.strip_prefix(CONTINUATION_PREFIX).unwrap_or(b))
}

/// Trains a vocabulary with WordPiece likelihood merges.
///
/// The alphabet is every character form observed (word-initial and `##`
/// continuation). Merges then repeatedly join the adjacent pair with the
/// highest `freq(ab) / (freq(a) * freq(b))` among pairs seen at least
/// `min_frequency` times; ties go to the lexicographically smallest merged
/// token. Training stops at `vocab_size` or when no pair qualifies.
pub fn train_vocab<S: AsRef<str>>(lines: &[S], cfg: &TokenizerConfig) -> Result<Vocabulary> {
    if cfg.vocab_size < special::COUNT {
        return Err(NmtError::Config(format!(
            "vocab_size {} cannot hold the {} special tokens",
            cfg.vocab_size,
            special::COUNT
        )));
    }
    if lines.is_empty() {
        return Err(NmtError::Input("cannot train a vocabulary on no lines".into()));
    }

    let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
    for line in lines {
        for w in normalize(line.as_ref(), cfg).split(' ') {
            if !w.is_empty() && w.chars().count() <= cfg.max_word_chars {
                *word_freq.entry(w.to_string()).or_default() += 1;
            }
        }
    }

    let mut vocab = Vocabulary::specials_only();
    let mut words: Vec<(Vec<String>, usize)> = word_freq
        .into_iter()
        .map(|(w, f)| (initial_symbols(&w), f))
        .collect();

    let mut alphabet: Vec<&String> = words.iter().flat_map(|(s, _)| s.iter()).collect();
    alphabet.sort();
    alphabet.dedup();
    if special::COUNT + alphabet.len() > cfg.vocab_size {
        return Err(NmtError::Config(format!(
            "vocab_size {} cannot hold {} specials plus an alphabet of {}",
            cfg.vocab_size,
            special::COUNT,
            alphabet.len()
        )));
    }
    let alphabet: Vec<String> = alphabet.into_iter().cloned().collect();
    for a in alphabet {
        vocab.push(a);
    }

    let min_pair = cfg.min_frequency.max(1);
    while vocab.len() < cfg.vocab_size {
        let mut sym_freq: HashMap<&str, usize> = HashMap::new();
        let mut pair_freq: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, f) in &words {
            for s in syms {
                *sym_freq.entry(s).or_default() += f;
            }
            for w in syms.windows(2) {
                *pair_freq.entry((&w[0], &w[1])).or_default() += f;
            }
        }
        let mut best: Option<(f64, String, (&str, &str))> = None;
        for (&(a, b), &f) in &pair_freq {
            if f < min_pair {
                continue;
            }
            let score = f as f64 / (sym_freq[a] as f64 * sym_freq[b] as f64);
            let token = merged(a, b);
            let better = match &best {
                None => true,
                Some((bs, bt, _)) => score > *bs || (score == *bs && token < *bt),
            };
            if better {
                best = Some((score, token, (a, b)));
            }
        }
        let Some((_, token, (a, b))) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        for (syms, _) in words.iter_mut() {
            if syms.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(token.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
        vocab.push(token);
    }
    Ok(vocab)
}

/// Token ids for one text, without bos/eos.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub surface: String,
}

/// Greedy longest-match-first segmentation of one normalized word.
///
/// Returns `None` when some position has no matching piece.
pub fn segment_word(word: &str, vocab: &Vocabulary) -> Option<Vec<u32>> {
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    let mut ids = Vec::new();
    let mut start = 0;
    let mut piece = String::new();
    while start < chars.len() {
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            let lo = chars[start].0;
            let hi = chars.get(end).map_or(word.len(), |c| c.0);
            piece.clear();
            if start > 0 {
                piece.push_str(CONTINUATION_PREFIX);
            }
            piece.push_str(&word[lo..hi]);
            if let Some(id) = vocab.id(&piece) {
                found = Some((id, end));
                break;
            }
        }
        let (id, end) = found?;
        ids.push(id);
        start = end;
    }
    Some(ids)
}

/// Normalizes, splits on whitespace and segments each word; unsegmentable or
/// over-long words become a single `[UNK]`.
pub fn encode(text: &str, vocab: &Vocabulary, cfg: &TokenizerConfig) -> TokenSequence {
    let surface = normalize(text, cfg);
    let mut ids = Vec::new();
    for word in surface.split(' ').filter(|w| !w.is_empty()) {
        let pieces = if word.chars().count() > cfg.max_word_chars {
            None
        } else {
            segment_word(word, vocab)
        };
        match pieces {
            Some(p) => ids.extend(p),
            None => ids.push(special::UNK),
        }
    }
    TokenSequence { ids, surface }
}

pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Result<Vec<String>> {
    ids.iter()
        .map(|&id| {
            vocab.token(id).map(str::to_string).ok_or_else(|| {
                NmtError::Range(format!("token id {id} outside vocabulary of {}", vocab.len()))
            })
        })
        .collect()
}

fn is_closing_punct(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| CLOSING_PUNCT.contains(&c))
}

/// Turns a token stream back into surface text.
///
/// `##` pieces fuse onto the previous token, specials are dropped, and
/// tokens made only of `. , ! ? ; :` attach to the previous token.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        if special::ALL.contains(&t) {
            continue;
        }
        if let Some(rest) = t.strip_prefix(CONTINUATION_PREFIX).filter(|r| !r.is_empty()) {
            out.push_str(rest);
        } else if is_closing_punct(t) || out.is_empty() {
            out.push_str(t);
        } else {
            out.push(' ');
            out.push_str(t);
        }
    }
    out
}
