use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::ArgMatches;
use nmt_core::beam::BeamConfig;
use nmt_core::{EvalConfig, FilterConfig, NmtError, Preset, Result, TokenizerConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Architecture choice plus the knobs the command line can change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Preset,
    pub dropout: f64,
    pub max_source_positions: usize,
    pub max_target_positions: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: Preset::VaswaniWmtEnDeBig,
            dropout: 0.3,
            max_source_positions: 512,
            max_target_positions: 512,
        }
    }
}

/// File locations used by the subcommands. Every entry is optional here and
/// can also be given as a flag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    pub src: Option<PathBuf>,
    pub tgt: Option<PathBuf>,
    pub tsv: Option<PathBuf>,
    pub dict: Option<PathBuf>,
    pub out_prefix: Option<PathBuf>,
    pub vocab_inputs: Vec<PathBuf>,
    pub vocab_out: Option<PathBuf>,
    pub data_prefix: Option<PathBuf>,
    pub valid_prefix: Option<PathBuf>,
    pub src_vocab: Option<PathBuf>,
    pub tgt_vocab: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub restore_file: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub refs: Option<PathBuf>,
    pub sources: Option<PathBuf>,
    pub systems: BTreeMap<String, PathBuf>,
    pub report: Option<PathBuf>,
}

/// Every stage's settings in one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub filter: FilterConfig,
    pub source_tokenizer: TokenizerConfig,
    pub target_tokenizer: TokenizerConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    /// Fraction of the training data held out for validation; 0 validates on
    /// the training data.
    pub valid_fraction: f64,
    pub beam: BeamConfig,
    pub eval: EvalConfig,
    pub paths: PathSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            filter: FilterConfig::default(),
            source_tokenizer: TokenizerConfig::marathi(),
            target_tokenizer: TokenizerConfig::english(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            valid_fraction: 0.0,
            beam: BeamConfig::default(),
            eval: EvalConfig::default(),
            paths: PathSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(PipelineConfig::default()),
            Some(p) => {
                require_file(p)?;
                let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| NmtError::Config(format!("{}: {e}", p.display())))
            }
        }
    }
}

pub fn io_err(path: &Path, e: std::io::Error) -> NmtError {
    NmtError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Fails unless `path` names an existing regular file.
pub fn require_file(path: &Path) -> Result<()> {
    match std::fs::metadata(path) {
        Ok(m) if m.is_file() => Ok(()),
        Ok(_) => Err(NmtError::Input(format!("{} is not a regular file", path.display()))),
        Err(e) => Err(io_err(path, e)),
    }
}

/// Resolves layered settings for one subcommand.
pub struct Layer<'a> {
    pub matches: &'a ArgMatches,
}

impl Layer<'_> {
    fn explicit(&self, id: &str) -> bool {
        self.matches.value_source(id) == Some(ValueSource::CommandLine)
    }

    /// The flag value if it was typed on the command line, else the config value.
    pub fn value<T>(&self, id: &str, flag: T, config: T) -> T {
        if self.explicit(id) {
            flag
        } else {
            config
        }
    }

    /// A path flag falling back to the config; missing in both is an error.
    pub fn path(&self, flag_name: &str, key: &str, flag: Option<PathBuf>, config: Option<PathBuf>) -> Result<PathBuf> {
        flag.or(config)
            .ok_or_else(|| NmtError::Config(format!("--{flag_name} is required (or paths.{key} in the config file)")))
    }
}
