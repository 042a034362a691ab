//! `manifest.json`: the effective configuration of a command, written before
//! the command does any work.

use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::write_file;
use crate::config::RunConfig;
use crate::dataset::{sha256_hex, DatasetHeader, MAGIC, VERSION};
use crate::error::{FlexError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub config_sha256: String,
    pub dataset: Option<String>,
    pub dataset_header_sha256: Option<String>,
    pub args: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, args: Vec<String>) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            config: config.clone(),
            config_sha256: config.hash(),
            dataset: None,
            dataset_header_sha256: None,
            args,
        }
    }

    pub fn with_dataset(mut self, path: &Path, header_sha256: String) -> Self {
        self.dataset = Some(path.display().to_string());
        self.dataset_header_sha256 = Some(header_sha256);
        self
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        write_file(&out_dir.join("manifest.json"), &serde_json::to_vec_pretty(self)?)
    }
}

/// Reads only the header of a dataset file; returns it with its SHA-256.
pub fn peek_dataset(path: &Path) -> Result<(DatasetHeader, String)> {
    let f = std::fs::File::open(path).map_err(|e| FlexError::input(path, e))?;
    let mut r = BufReader::new(f);
    let mut pre = [0u8; 20];
    r.read_exact(&mut pre).map_err(|_| FlexError::format(path, "file shorter than its preamble"))?;
    if &pre[..8] != MAGIC {
        return Err(FlexError::format(path, "not a FLEXDATA file"));
    }
    let version = u32::from_le_bytes(pre[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(FlexError::format(path, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(pre[12..20].try_into().unwrap());
    let mut raw = vec![0u8; n as usize];
    r.read_exact(&mut raw).map_err(|_| FlexError::format(path, "truncated header"))?;
    let header = serde_json::from_slice(&raw).map_err(|e| FlexError::format(path, format!("corrupt header: {e}")))?;
    Ok((header, sha256_hex(&raw)))
}
