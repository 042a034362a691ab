//! `FLEXCKPT`: parameters plus optimizer state.
//!
//! Layout: magic, `u32` version, `u64` header length, JSON
//! [`CheckpointHeader`], then for every parameter in header order its values,
//! AdamW first moment and second moment as raw little-endian `f32`.

use std::path::Path;

use flex_core::autodiff::ParamStore;
use flex_core::model::FlexModel;
use flex_core::optim::AdamW;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, read_preamble, write_file, write_preamble, Encoder};
use crate::config::RunConfig;
use crate::error::{FlexError, Result};

pub const MAGIC: &[u8; 8] = b"FLEXCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    /// Optimizer steps completed.
    pub step: u64,
    pub params: Vec<ParamMeta>,
}

/// A restored training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub store: ParamStore,
    pub opt: AdamW,
}

pub fn param_seed(config: &RunConfig) -> u64 {
    flex_core::rng::derive(config.seed, "params")
}

/// Freshly initialized model, parameters and optimizer for `config`.
pub fn init(config: &RunConfig) -> Result<(FlexModel, ParamStore, AdamW)> {
    config.validate()?;
    let mut store = ParamStore::new(param_seed(config));
    let model = FlexModel::new(&mut store, config.model()?)?;
    let opt = AdamW::new(config.adamw(), &store);
    Ok((model, store, opt))
}

pub fn encode(config: &RunConfig, store: &ParamStore, opt: &AdamW) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: config.clone(),
        step: opt.step,
        params: store
            .iter()
            .map(|(_, p)| ParamMeta { name: p.name.clone(), shape: p.value.shape().to_vec(), frozen: p.frozen })
            .collect(),
    };
    let mut e = Encoder::default();
    write_preamble(&mut e, MAGIC, VERSION, &header)?;
    for (id, p) in store.iter() {
        e.f32s(p.value.data());
        e.f32s(&opt.m[id.index()]);
        e.f32s(&opt.v[id.index()]);
    }
    Ok(e.buf)
}

pub fn save(path: &Path, config: &RunConfig, store: &ParamStore, opt: &AdamW) -> Result<()> {
    write_file(path, &encode(config, store, opt)?)
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<(Checkpoint, FlexModel)> {
    let (header, _, mut d): (CheckpointHeader, _, _) = read_preamble(path, bytes, MAGIC, VERSION)?;
    let (model, mut store, mut opt) = init(&header.config)?;
    if store.len() != header.params.len() {
        return Err(FlexError::format(
            path,
            format!("{} parameters stored, model has {}", header.params.len(), store.len()),
        ));
    }
    for (i, meta) in header.params.iter().enumerate() {
        let n: usize = meta.shape.iter().product();
        let short = || FlexError::format(path, format!("truncated data of `{}`", meta.name));
        let value = d.f32s(n).ok_or_else(short)?;
        store.load(&meta.name, &meta.shape, &value)?;
        let id = store.id(&meta.name).expect("loaded above");
        if id.index() != i {
            return Err(FlexError::format(path, format!("`{}` stored out of order", meta.name)));
        }
        store.get_mut(id).frozen = meta.frozen;
        opt.m[i] = d.f32s(n).ok_or_else(short)?;
        opt.v[i] = d.f32s(n).ok_or_else(short)?;
    }
    if d.remaining() != 0 {
        return Err(FlexError::format(path, format!("{} trailing bytes", d.remaining())));
    }
    opt.step = header.step;
    Ok((Checkpoint { config: header.config, step: header.step, store, opt }, model))
}

pub fn load(path: &Path) -> Result<(Checkpoint, FlexModel)> {
    decode(path, &read_file(path)?)
}
