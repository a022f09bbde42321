//! Building blocks for a small-scale neural machine translation pipeline.
//!
//! The crate covers every stage from raw bitext to evaluation tables:
//!
//! ```text
//! corpus ──► dictfilter ──► wordpiece ──► training ◄── transformer
//!                                            │
//!                          evaluation ◄── beam
//! ```
//!
//! * [`corpus`]: Moses / TSV ingestion, dedup, splits and statistics.
//! * [`dictfilter`]: bilingual-dictionary match-ratio filtering.
//! * [`wordpiece`]: WordPiece vocabulary training, encoding and detokenization.
//! * [`transformer`]: an encoder-decoder transformer with hand-written backprop.
//! * [`training`]: label-smoothed loss, Adam, inverse-sqrt warmup, batching, checkpoints.
//! * [`beam`]: length-normalized beam search and corpus translation.
//! * [`evaluation`]: 13a tokenization, corpus BLEU, word-count error, bucketed reports.

pub mod beam;
pub mod corpus;
pub mod dictfilter;
pub mod error;
pub mod evaluation;
pub mod training;
pub mod transformer;
pub mod wordpiece;

pub use beam::{beam_search, translate_corpus, BeamConfig, Hypothesis, SkipRecord};
pub use corpus::{CorpusStats, ParallelCorpus, SentencePair};
pub use dictfilter::{BilingualDictionary, FilterConfig, FilterReport};
pub use error::{CheckpointError, NmtError, Result};
pub use evaluation::{BleuScore, EvalConfig, EvalReport};
pub use training::{TrainConfig, TrainState, Trainer};
pub use transformer::{Batch, ModelConfig, Parameters, Preset, Real, Transformer};
pub use wordpiece::{TokenizerConfig, Vocabulary};

/// Fixed ids of the special tokens shared by every vocabulary.
pub mod special {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const BOS: u32 = 2;
    pub const EOS: u32 = 3;
    pub const PAD_TOKEN: &str = "[PAD]";
    pub const UNK_TOKEN: &str = "[UNK]";
    pub const BOS_TOKEN: &str = "[BOS]";
    pub const EOS_TOKEN: &str = "[EOS]";
    pub const ALL: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN];
    pub const COUNT: usize = 4;
}
