use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlexError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
    #[error("cannot read {path}: {source}")]
    Input { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: truncated at record {record}")]
    Truncated { path: PathBuf, record: u64 },
    #[error("training diverged at step {step}: loss {value}")]
    Diverged { step: u64, value: f32 },
    #[error(transparent)]
    Core(#[from] flex_core::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FlexError>;

impl FlexError {
    /// Process exit code: 2 for bad configuration or unusable output paths,
    /// 3 for everything that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            FlexError::Config(_) | FlexError::Output { .. } => 2,
            FlexError::Core(flex_core::Error::Config(_)) => 2,
            _ => 3,
        }
    }

    pub fn output(path: &Path, source: std::io::Error) -> Self {
        FlexError::Output { path: path.to_path_buf(), source }
    }

    pub fn input(path: &Path, source: std::io::Error) -> Self {
        FlexError::Input { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        FlexError::Format { path: path.to_path_buf(), msg: msg.into() }
    }
}
