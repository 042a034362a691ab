//! Data generation, training, evaluation, benchmarking, ablation sweeps and
//! attention analysis on top of [`flex_core`].
//!
//! Every command writes its artifacts under one output directory:
//! `manifest.json`, `metrics.jsonl`, `report.json`, `sweep.csv`, `attn/` and
//! `ckpt/`.

pub mod ablate;
pub mod analyze;
mod binio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod eval;
pub mod manifest;
pub mod trainer;

pub use error::{FlexError, Result};
