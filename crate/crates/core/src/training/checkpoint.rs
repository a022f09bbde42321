//! Binary checkpoint format.
//!
//! ```text
//! "NMTF"                      4 bytes magic
//! version                     u32 LE
//! header_len                  u64 LE
//! header                      JSON (model, train, state, optional tokenizers)
//! tensor_count                u32 LE
//! per tensor:
//!   name_len u32 LE, name UTF-8
//!   rank u32 LE, dims u64 LE × rank
//!   data f32 LE × product(dims)
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::error::{CheckpointError, NmtError, Result};
use crate::transformer::{ModelConfig, Parameters};
use crate::wordpiece::{TokenizerConfig, Vocabulary};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NMTF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Vocabularies and normalization settings for both sides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerBundle {
    pub src_config: TokenizerConfig,
    pub tgt_config: TokenizerConfig,
    pub src_tokens: Vec<String>,
    pub tgt_tokens: Vec<String>,
}

impl TokenizerBundle {
    pub fn new(src: &Vocabulary, src_config: TokenizerConfig, tgt: &Vocabulary, tgt_config: TokenizerConfig) -> Self {
        TokenizerBundle {
            src_config,
            tgt_config,
            src_tokens: src.tokens().to_vec(),
            tgt_tokens: tgt.tokens().to_vec(),
        }
    }

    pub fn vocabularies(&self) -> Result<(Vocabulary, Vocabulary)> {
        Ok((
            Vocabulary::from_tokens(self.src_tokens.clone())?,
            Vocabulary::from_tokens(self.tgt_tokens.clone())?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
    pub params: Parameters<f32>,
    pub tokenizers: Option<TokenizerBundle>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    train: TrainConfig,
    state: TrainState,
    tokenizers: Option<TokenizerBundle>,
}

/// `checkpoint{epoch}.pt`.
pub fn checkpoint_file_name(epoch: usize) -> String {
    format!("checkpoint{epoch}.pt")
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        dtype: "f32".into(),
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        state: ckpt.state.clone(),
        tokenizers: ckpt.tokenizers.clone(),
    })?;
    let tensors = ckpt.params.named_tensors();
    let mut out = Vec::with_capacity(header.len() + 4 * ckpt.params.num_parameters() + 1024);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| NmtError::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated { what: what.to_string() }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct RawTensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn to_usize(v: u64, what: &str) -> Result<usize, CheckpointError> {
    usize::try_from(v).map_err(|_| CheckpointError::Truncated { what: what.to_string() })
}

/// Parses a checkpoint and materializes parameters shaped by `expected`
/// (or by the checkpoint's own model config when `None`).
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let header_len = to_usize(r.u64("header length")?, "header")?;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(CheckpointError::Header(format!("unsupported dtype {}", header.dtype)));
    }
    header.model.validate().map_err(|e| CheckpointError::Header(e.to_string()))?;

    let count = r.u32("tensor count")?;
    let mut raw: HashMap<String, RawTensor> = HashMap::new();
    let mut order = Vec::new();
    for i in 0..count {
        let what = format!("tensor record {i}");
        let name_len = r.u32(&what)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &what)?)
            .map_err(|_| CheckpointError::Header(format!("{what}: name is not UTF-8")))?
            .to_string();
        let what = format!("tensor {name}");
        let rank = r.u32(&what)? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(to_usize(r.u64(&what)?, &what)?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Truncated { what: what.clone() })?;
        let data = r
            .take(n, &what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        order.push(name.clone());
        raw.insert(name, RawTensor { dims, data });
    }

    let shape_cfg = expected.unwrap_or(&header.model);
    let mut params = Parameters::<f32>::zeros(shape_cfg);
    for (name, mut t) in params.named_tensors_mut() {
        let src = raw.remove(&name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if src.dims != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: t.shape().to_vec(),
                found: src.dims,
            });
        }
        for (d, s) in t.iter_mut().zip(src.data) {
            *d = s;
        }
    }
    if let Some(extra) = order.into_iter().find(|n| raw.contains_key(n)) {
        return Err(CheckpointError::UnexpectedTensor(extra));
    }
    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        state: header.state,
        params,
        tokenizers: header.tokenizers,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| NmtError::io(path, e))?;
    Ok(decode_checkpoint(&bytes, None)?)
}

/// Loads a checkpoint and checks every tensor against the shapes implied by `cfg`.
pub fn load_checkpoint_for(path: &Path, cfg: &ModelConfig) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| NmtError::io(path, e))?;
    Ok(decode_checkpoint(&bytes, Some(cfg))?)
}
