use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nmt_core::dictfilter::MatchDirection;
use nmt_core::evaluation::BucketSide;
use nmt_core::Preset;

/// Dictionary-filtered corpus curation, WordPiece vocabularies, transformer
/// training, beam-search translation and BLEU evaluation.
///
/// Settings are layered: built-in defaults, then the JSON file given with
/// --config, then flags given on the command line.
#[derive(Debug, Parser)]
#[command(name = "nmt", version, propagate_version = true)]
pub struct Cli {
    /// JSON pipeline configuration; flags given explicitly take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Keep sentence pairs whose dictionary match ratio reaches the threshold.
    Filter(FilterArgs),
    /// Train a WordPiece vocabulary on one or more text files.
    BuildVocab(BuildVocabArgs),
    /// Train a transformer and write per-epoch checkpoints.
    Train(TrainArgs),
    /// Translate a file line by line with beam search.
    Translate(TranslateArgs),
    /// Score one or more systems against references.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    SrcToTgt,
    TgtToSrc,
}

impl From<Direction> for MatchDirection {
    fn from(d: Direction) -> Self {
        match d {
            Direction::SrcToTgt => MatchDirection::SourceToTarget,
            Direction::TgtToSrc => MatchDirection::TargetToSource,
        }
    }
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Source side of a Moses-style corpus.
    #[arg(long, requires = "tgt", conflicts_with = "tsv")]
    pub src: Option<PathBuf>,
    /// Target side of a Moses-style corpus.
    #[arg(long, requires = "src")]
    pub tgt: Option<PathBuf>,
    /// Tab-separated corpus, one `source<TAB>target` pair per line.
    #[arg(long)]
    pub tsv: Option<PathBuf>,
    /// Bilingual dictionary, one `source<TAB>target` entry per line.
    #[arg(long)]
    pub dict: Option<PathBuf>,
    /// Minimum match ratio for a pair to be kept (inclusive).
    #[arg(long, default_value_t = 0.30)]
    pub threshold: f64,
    /// Which side's words are looked up in the dictionary.
    #[arg(long, value_enum, default_value_t = Direction::SrcToTgt)]
    pub direction: Direction,
    /// Compare words with surrounding punctuation intact.
    #[arg(long)]
    pub keep_punctuation: bool,
    /// Writes PREFIX.kept.{src,tgt}, PREFIX.rejected.{src,tgt} and PREFIX.report.json.
    #[arg(long)]
    pub out_prefix: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    /// Training text, one sentence per line (repeatable).
    #[arg(long, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Which tokenizer section of the configuration to start from.
    #[arg(long, value_enum, default_value_t = Side::Source)]
    pub side: Side,
    #[arg(long, default_value_t = 4000)]
    pub vocab_size: usize,
    /// Minimum pair frequency for a merge.
    #[arg(long, default_value_t = 2)]
    pub min_frequency: usize,
    /// Lowercase text before training.
    #[arg(long)]
    pub lowercase: bool,
    /// Output vocabulary file, one token per line.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Reads PREFIX.src and PREFIX.tgt.
    #[arg(long)]
    pub data_prefix: Option<PathBuf>,
    /// Validation corpus PREFIX.src / PREFIX.tgt.
    #[arg(long, conflicts_with = "valid_fraction")]
    pub valid_prefix: Option<PathBuf>,
    /// Hold out this fraction of the training data for validation; 0 validates
    /// on the training data itself.
    #[arg(long, default_value_t = 0.0)]
    pub valid_fraction: f64,
    #[arg(long)]
    pub src_vocab: Option<PathBuf>,
    #[arg(long)]
    pub tgt_vocab: Option<PathBuf>,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set, value_name = "BOOL")]
    pub src_lowercase: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set, value_name = "BOOL")]
    pub tgt_lowercase: bool,
    /// Architecture preset.
    #[arg(long, default_value_t = Preset::VaswaniWmtEnDeBig)]
    pub arch: Preset,
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
    #[arg(long, default_value_t = 512)]
    pub max_source_positions: usize,
    #[arg(long, default_value_t = 512)]
    pub max_target_positions: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    /// Adam betas, e.g. "(0.9,0.98)".
    #[arg(long, default_value = "(0.9,0.98)", value_parser = parse_betas)]
    pub adam_betas: (f64, f64),
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[arg(long, default_value_t = 0.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 10_000)]
    pub warmup_updates: u64,
    #[arg(long, default_value_t = 0.1)]
    pub label_smoothing: f64,
    #[arg(long, default_value_t = 0.0001)]
    pub weight_decay: f64,
    /// Padded tokens per micro-batch.
    #[arg(long, default_value_t = 4096)]
    pub max_tokens: usize,
    /// Micro-batches accumulated per optimizer update.
    #[arg(long, default_value_t = 2)]
    pub update_freq: usize,
    /// Stop once validation perplexity falls below this ("inf" disables).
    #[arg(long, default_value_t = 3.0)]
    pub stop_ppl: f64,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    /// Hard cap on optimizer updates.
    #[arg(long)]
    pub max_updates: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "checkpoints")]
    pub checkpoint_dir: PathBuf,
    /// Continue from this checkpoint (Adam moments restart from zero).
    #[arg(long)]
    pub restore_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Source text, one sentence per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Translations, one per input line; skips go to OUTPUT.skips.json.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Length-normalization exponent.
    #[arg(long, default_value_t = 1.0)]
    pub lenpen: f64,
    /// Maximum output tokens (default: 2 × source length + 10, capped by the model).
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Expected architecture; the checkpoint must match its tensor shapes.
    #[arg(long)]
    pub arch: Option<Preset>,
    /// Source vocabulary overriding the one stored in the checkpoint.
    #[arg(long)]
    pub src_vocab: Option<PathBuf>,
    /// Target vocabulary overriding the one stored in the checkpoint.
    #[arg(long)]
    pub tgt_vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BucketSideArg {
    Source,
    Reference,
}

impl From<BucketSideArg> for BucketSide {
    fn from(b: BucketSideArg) -> Self {
        match b {
            BucketSideArg::Source => BucketSide::Source,
            BucketSideArg::Reference => BucketSide::Reference,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Reference translations, one per line.
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// A system to score, as LABEL=PATH (repeatable).
    #[arg(long = "sys", value_name = "LABEL=PATH", value_parser = parse_system)]
    pub systems: Vec<(String, PathBuf)>,
    /// Source sentences, needed when bucketing by source length.
    #[arg(long)]
    pub sources: Option<PathBuf>,
    /// Pairs with fewer words than this fall in the small bucket.
    #[arg(long, default_value_t = 15)]
    pub bucket_threshold: usize,
    #[arg(long, value_enum, default_value_t = BucketSideArg::Source)]
    pub bucket_side: BucketSideArg,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_betas(s: &str) -> Result<(f64, f64), String> {
    let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok((
            a.parse().map_err(|e| format!("beta1: {e}"))?,
            b.parse().map_err(|e| format!("beta2: {e}"))?,
        )),
        _ => Err(format!("expected two comma-separated betas, got {s:?}")),
    }
}

fn parse_system(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((label, path)) if !label.is_empty() && !path.is_empty() => Ok((label.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected LABEL=PATH, got {s:?}")),
    }
}
