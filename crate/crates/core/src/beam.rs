//! Length-normalized beam search and corpus translation.

use std::cmp::Ordering;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NmtError, Result};
use crate::special::{BOS, EOS, PAD};
use crate::transformer::{EncoderOutput, Real, Transformer};
use crate::wordpiece::{self, TokenizerConfig, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Maximum number of tokens after `BOS`, `EOS` included. `None` means
    /// `min(2·src_len + 10, max_target_positions)`.
    pub max_len: Option<usize>,
    pub length_penalty: f64,
    pub batch_size: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 5,
            max_len: None,
            length_penalty: 1.0,
            batch_size: 32,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.batch_size == 0 || self.max_len == Some(0) {
            return Err(NmtError::Config(
                "beam_size, batch_size and max_len must be at least 1".into(),
            ));
        }
        if !self.length_penalty.is_finite() {
            return Err(NmtError::Config("length_penalty must be finite".into()));
        }
        Ok(())
    }

    /// Effective length limit for a source of `src_len` tokens.
    pub fn max_len_for(&self, src_len: usize, max_target_positions: usize) -> usize {
        self.max_len
            .unwrap_or(2 * src_len + 10)
            .min(max_target_positions)
            .max(1)
    }
}

/// A finished hypothesis: `BOS … EOS`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Cumulative log-probability.
    pub score: f64,
    /// `score / length^α` where length counts the tokens after `BOS`.
    pub normalized_score: f64,
}

impl Hypothesis {
    /// Tokens strictly between `BOS` and `EOS`.
    pub fn content(&self) -> &[u32] {
        let end = self.tokens.len() - usize::from(self.tokens.last() == Some(&EOS));
        &self.tokens[1.min(end)..end]
    }
}

/// A model that can be queried one decoding step at a time.
pub trait StepModel: Sync {
    type Memory: Send + Sync;

    fn vocab_size(&self) -> usize;
    fn max_source_positions(&self) -> usize;
    fn max_target_positions(&self) -> usize;
    fn encode(&self, src: &[u32]) -> Result<Self::Memory>;
    /// Next-token log-probabilities after each prefix. All prefixes have the
    /// same length and start with `BOS`.
    fn next_log_probs(&self, memory: &Self::Memory, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

impl<T: Real + Send + Sync> StepModel for Transformer<T> {
    type Memory = EncoderOutput<T>;

    fn vocab_size(&self) -> usize {
        self.cfg.tgt_vocab_size
    }

    fn max_source_positions(&self) -> usize {
        self.cfg.max_source_positions
    }

    fn max_target_positions(&self) -> usize {
        self.cfg.max_target_positions
    }

    fn encode(&self, src: &[u32]) -> Result<EncoderOutput<T>> {
        let arr = Array2::from_shape_vec((1, src.len()), src.to_vec()).expect("row shape");
        self.encode_source(&arr)
    }

    fn next_log_probs(&self, memory: &EncoderOutput<T>, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let width = prefixes.first().map_or(0, Vec::len);
        let flat: Vec<u32> = prefixes.iter().flatten().copied().collect();
        let arr = Array2::from_shape_vec((prefixes.len(), width), flat)
            .map_err(|_| NmtError::Input("prefixes must share one length".into()))?;
        let mem = memory.select(&vec![0; prefixes.len()]);
        let lp = self.decode_step(&mem, &arr)?;
        Ok(lp
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|x| x.to_f64_lossy()).collect())
            .collect())
    }
}

fn normalized(score: f64, len: usize, alpha: f64) -> f64 {
    score / (len as f64).powf(alpha)
}

/// Descending by score, then ascending by token sequence.
fn rank(a_score: f64, a_tokens: &[u32], b_score: f64, b_tokens: &[u32]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_tokens.cmp(b_tokens))
}

fn check_source<M: StepModel>(model: &M, src: &[u32]) -> Result<()> {
    if src.len() > model.max_source_positions() {
        return Err(NmtError::Length {
            len: src.len(),
            limit: model.max_source_positions(),
        });
    }
    Ok(())
}

/// All finished hypotheses, best first.
///
/// Each step expands every live hypothesis over the whole vocabulary and keeps
/// the `beam_size` best candidates by cumulative score; candidates ending in
/// `EOS` move to the finished pool. The search stops when no hypothesis is
/// live, when `beam_size` finished hypotheses can no longer be beaten, or at
/// `max_len`, where only `EOS` is allowed.
pub fn beam_search_nbest<M: StepModel>(model: &M, src: &[u32], cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    check_source(model, src)?;
    let memory = model.encode(src)?;
    let max_len = cfg.max_len_for(src.len(), model.max_target_positions());
    let alpha = cfg.length_penalty;
    let vocab = model.vocab_size();

    let mut live: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 1..=max_len {
        let prefixes: Vec<Vec<u32>> = live.iter().map(|(t, _)| t.clone()).collect();
        let log_probs = model.next_log_probs(&memory, &prefixes)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (h, lp) in log_probs.iter().enumerate() {
            for tok in 0..vocab as u32 {
                if tok == PAD || tok == BOS || (step == max_len && tok != EOS) {
                    continue;
                }
                let s = live[h].1 + lp[tok as usize];
                if s.is_finite() {
                    cands.push((s, h, tok));
                }
            }
        }
        // Live prefixes share one length, so comparing (prefix, token) is the
        // lexicographic order of the extended sequences.
        let order = |a: &(f64, usize, u32), b: &(f64, usize, u32)| {
            b.0.total_cmp(&a.0)
                .then_with(|| live[a.1].0.cmp(&live[b.1].0))
                .then_with(|| a.2.cmp(&b.2))
        };
        if cands.len() > cfg.beam_size {
            cands.select_nth_unstable_by(cfg.beam_size - 1, order);
            cands.truncate(cfg.beam_size);
        }
        cands.sort_by(order);
        let seq = |&(_, h, tok): &(f64, usize, u32)| {
            let mut t = live[h].0.clone();
            t.push(tok);
            t
        };

        let mut next = Vec::with_capacity(cands.len());
        for c in &cands {
            let tokens = seq(c);
            if c.2 == EOS {
                finished.push(Hypothesis {
                    normalized_score: normalized(c.0, step, alpha),
                    tokens,
                    score: c.0,
                });
            } else {
                next.push((tokens, c.0));
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if finished.len() >= cfg.beam_size {
            finished.sort_by(|a, b| rank(a.normalized_score, &a.tokens, b.normalized_score, &b.tokens));
            let kth = finished[cfg.beam_size - 1].normalized_score;
            let bound = live
                .iter()
                .map(|(_, s)| normalized(*s, max_len, alpha).max(normalized(*s, step + 1, alpha)))
                .fold(f64::NEG_INFINITY, f64::max);
            if bound < kth {
                break;
            }
        }
    }
    if finished.is_empty() {
        return Err(NmtError::Numeric("beam search found no finite-scoring hypothesis".into()));
    }
    finished.sort_by(|a, b| rank(a.normalized_score, &a.tokens, b.normalized_score, &b.tokens));
    Ok(finished)
}

/// The best hypothesis by normalized score, ties to the lower token sequence.
pub fn beam_search<M: StepModel>(model: &M, src: &[u32], cfg: &BeamConfig) -> Result<Hypothesis> {
    Ok(beam_search_nbest(model, src, cfg)?.swap_remove(0))
}

/// Picks the most probable token at every step (lowest id on ties), forcing
/// `EOS` at `max_len`.
pub fn greedy_search<M: StepModel>(model: &M, src: &[u32], max_len: usize, alpha: f64) -> Result<Hypothesis> {
    check_source(model, src)?;
    let memory = model.encode(src)?;
    let max_len = max_len.max(1);
    let mut tokens = vec![BOS];
    let mut score = 0.0;
    for step in 1..=max_len {
        let lp = model.next_log_probs(&memory, std::slice::from_ref(&tokens))?.swap_remove(0);
        let mut best: Option<(u32, f64)> = None;
        for (tok, &v) in lp.iter().enumerate() {
            let tok = tok as u32;
            if tok == PAD || tok == BOS || (step == max_len && tok != EOS) || !v.is_finite() {
                continue;
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((tok, v));
            }
        }
        let (tok, v) = best.ok_or_else(|| NmtError::Numeric("greedy search found no finite token".into()))?;
        tokens.push(tok);
        score += v;
        if tok == EOS {
            return Ok(Hypothesis {
                normalized_score: normalized(score, step, alpha),
                tokens,
                score,
            });
        }
    }
    unreachable!("EOS is forced at max_len")
}

/// Why a source line produced an empty translation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    /// 1-based input line.
    pub line: usize,
    pub reason: String,
    pub source_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translations {
    pub outputs: Vec<String>,
    pub skips: Vec<SkipRecord>,
}

/// Source and target vocabularies plus the source-side normalization.
#[derive(Debug, Clone, Copy)]
pub struct Tokenizers<'a> {
    pub src_vocab: &'a Vocabulary,
    pub src_config: &'a TokenizerConfig,
    pub tgt_vocab: &'a Vocabulary,
}

/// Encodes, decodes and detokenizes every source line, preserving order.
///
/// Empty and over-long inputs yield an empty output and a [`SkipRecord`].
pub fn translate_corpus<T: Real + Send + Sync, S: AsRef<str> + Sync>(
    model: &Transformer<T>,
    sources: &[S],
    tok: Tokenizers<'_>,
    cfg: &BeamConfig,
) -> Result<Translations> {
    cfg.validate()?;
    if tok.src_vocab.len() != model.cfg.src_vocab_size || tok.tgt_vocab.len() != model.cfg.tgt_vocab_size {
        return Err(NmtError::Config(format!(
            "vocabularies ({} source, {} target) do not match the model ({} source, {} target)",
            tok.src_vocab.len(),
            tok.tgt_vocab.len(),
            model.cfg.src_vocab_size,
            model.cfg.tgt_vocab_size
        )));
    }
    let translate_one = |i: usize, text: &str| -> Result<(String, Option<SkipRecord>)> {
        let ids = wordpiece::encode(text, tok.src_vocab, tok.src_config).ids;
        let skip = |reason: &str| {
            Ok((
                String::new(),
                Some(SkipRecord {
                    line: i + 1,
                    reason: reason.to_string(),
                    source_tokens: ids.len(),
                }),
            ))
        };
        if ids.is_empty() {
            return skip("empty source");
        }
        if ids.len() > model.cfg.max_source_positions {
            return skip("source exceeds max_source_positions");
        }
        let best = beam_search(model, &ids, cfg)?;
        let pieces = wordpiece::decode(best.content(), tok.tgt_vocab)?;
        Ok((wordpiece::detokenize(&pieces), None))
    };

    let chunks: Vec<Vec<(String, Option<SkipRecord>)>> = sources
        .par_chunks(cfg.batch_size)
        .enumerate()
        .map(|(c, chunk)| {
            chunk
                .iter()
                .enumerate()
                .map(|(j, s)| translate_one(c * cfg.batch_size + j, s.as_ref()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut out = Translations {
        outputs: Vec::with_capacity(sources.len()),
        skips: Vec::new(),
    };
    for (text, skip) in chunks.into_iter().flatten() {
        out.outputs.push(text);
        out.skips.extend(skip);
    }
    Ok(out)
}
