use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the translation pipeline.
#[derive(Debug, Error)]
pub enum NmtError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path} is not valid UTF-8 (byte offset {offset})")]
    Encoding { path: PathBuf, offset: usize },

    #[error("alignment error: source has {source_lines} lines, target has {target_lines}")]
    Alignment {
        source_lines: usize,
        target_lines: usize,
    },

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("sequence of length {len} exceeds the limit of {limit} positions")]
    Length { len: usize, limit: usize },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Typed failures when reading a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected \"NMTF\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor {0} is missing from the checkpoint")]
    MissingTensor(String),

    #[error("unexpected tensor {0} in checkpoint")]
    UnexpectedTensor(String),

    #[error("malformed checkpoint header: {0}")]
    Header(String),
}

impl NmtError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NmtError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input or configuration, as opposed to
    /// numeric failures inside the model.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, NmtError::Numeric(_))
    }
}

pub type Result<T, E = NmtError> = std::result::Result<T, E>;
