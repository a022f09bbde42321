use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NmtError, Result};

/// Named architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "iwslt-de-en")]
    IwsltDeEn,
    #[serde(rename = "wmt-en-de")]
    WmtEnDe,
    #[serde(rename = "wmt-en-de-big-t2t")]
    WmtEnDeBigT2t,
    #[serde(rename = "vaswani-wmt-en-de-big")]
    VaswaniWmtEnDeBig,
    #[serde(rename = "toy")]
    Toy,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::IwsltDeEn,
        Preset::WmtEnDe,
        Preset::WmtEnDeBigT2t,
        Preset::VaswaniWmtEnDeBig,
        Preset::Toy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::IwsltDeEn => "iwslt-de-en",
            Preset::WmtEnDe => "wmt-en-de",
            Preset::WmtEnDeBigT2t => "wmt-en-de-big-t2t",
            Preset::VaswaniWmtEnDeBig => "vaswani-wmt-en-de-big",
            Preset::Toy => "toy",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = NmtError;

    /// Accepts `wmt-en-de`, `transformer_wmt_en_de` and similar spellings.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let norm = norm.strip_prefix("transformer-").unwrap_or(&norm);
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| {
                let valid: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                NmtError::Config(format!(
                    "unknown architecture {s:?}; valid presets: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub share_decoder_io: bool,
    pub max_source_positions: usize,
    pub max_target_positions: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub pre_layernorm: bool,
}

impl ModelConfig {
    pub fn preset(preset: Preset, src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        // (layers, d_model, ffn, heads, pre-LN)
        let (layers, d_model, ffn_dim, n_heads, pre_layernorm) = match preset {
            Preset::IwsltDeEn => (6, 512, 1024, 4, false),
            Preset::WmtEnDe => (6, 512, 2048, 8, false),
            Preset::WmtEnDeBigT2t => (6, 1024, 4096, 16, true),
            Preset::VaswaniWmtEnDeBig => (6, 1024, 4096, 16, false),
            Preset::Toy => (2, 64, 128, 4, false),
        };
        ModelConfig {
            preset,
            d_model,
            n_heads,
            n_encoder_layers: layers,
            n_decoder_layers: layers,
            ffn_dim,
            dropout: 0.3,
            share_decoder_io: true,
            max_source_positions: 512,
            max_target_positions: 512,
            src_vocab_size,
            tgt_vocab_size,
            pre_layernorm,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NmtError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.max_source_positions == 0 || self.max_target_positions == 0 {
            return fail("position limits must be at least 1".into());
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be positive".into());
        }
        if self.src_vocab_size <= crate::special::COUNT || self.tgt_vocab_size <= crate::special::COUNT {
            return fail(format!(
                "vocabularies must hold more than the special tokens (src {}, tgt {})",
                self.src_vocab_size, self.tgt_vocab_size
            ));
        }
        Ok(())
    }
}
