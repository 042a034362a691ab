//! Flat JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use flex_core::model::ModelConfig;
use flex_core::optim::AdamWConfig;
use flex_core::patchify::PatchifierConfig;
use flex_core::policy::{LayoutMode, Representation};
use flex_core::scene::{EncoderConfig, EncoderVariant};
use flex_core::trajectory::WaypointVocab;
use flex_core::worldsim::WorldConfig;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetHeader;
use crate::error::{FlexError, Result};

/// Every knob of a run. Unknown keys are rejected; missing keys take the
/// desk defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub repr: Representation,
    pub variant: EncoderVariant,
    pub interleave: bool,
    /// Scene tokens per clip.
    pub k: usize,
    /// Scene-encoder layers.
    pub layers: usize,
    /// Scene-encoder heads.
    pub heads: usize,
    pub d_enc: usize,
    pub patch_size: usize,
    pub patchifier_depth: usize,
    pub d_llm: usize,
    pub policy_blocks: usize,
    pub policy_heads: usize,
    /// Baseline tokens per image as `[rows, cols]`; absent keeps the native grid.
    pub baseline_grid: Option<[usize; 2]>,
    pub cameras: usize,
    pub timesteps: usize,
    pub horizon: usize,
    pub history_len: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub x_bins: u32,
    pub y_bins: u32,
    pub x_range: [f32; 2],
    pub y_range: [f32; 2],
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub batch_size: usize,
    pub warmup: u64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub weight_decay: f32,
    /// Writes an extra checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    /// Clips generated by `gen-data` when no count is given.
    pub clips: u64,
    pub train_stride: usize,
    pub eval_stride: usize,
    /// Trajectories sampled per clip for minADE.
    pub samples: usize,
    pub temperature: f32,
    /// Caps the number of test clips evaluated (0 means all).
    pub eval_clips: usize,
    pub bench_warmup: usize,
    pub bench_iters: usize,
    pub bench_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            repr: Representation::Flex,
            variant: EncoderVariant::JointSelf,
            interleave: true,
            k: 90,
            layers: 4,
            heads: 4,
            d_enc: 64,
            patch_size: 8,
            patchifier_depth: 0,
            d_llm: 128,
            policy_blocks: 3,
            policy_heads: 4,
            baseline_grid: None,
            cameras: 2,
            timesteps: 9,
            horizon: 10,
            history_len: 4,
            image_height: 32,
            image_width: 64,
            x_bins: 32,
            y_bins: 32,
            x_range: [-5.0, 40.0],
            y_range: [-10.0, 10.0],
            stage1_steps: 2000,
            stage2_steps: 500,
            batch_size: 16,
            warmup: 100,
            lr_stage1: 4e-4,
            lr_stage2: 1e-5,
            weight_decay: 0.01,
            checkpoint_every: 0,
            seed: 0,
            dataset: None,
            clips: 2000,
            train_stride: 2,
            eval_stride: 1,
            samples: 6,
            temperature: 1.0,
            eval_clips: 0,
            bench_warmup: 2,
            bench_iters: 8,
            bench_reps: 5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FlexError::input(path, e))?;
        serde_json::from_str(&text).map_err(|e| FlexError::Config(format!("{}: {e}", path.display())))
    }

    pub fn total_steps(&self) -> u64 {
        self.stage1_steps + self.stage2_steps
    }

    pub fn vocab(&self) -> Result<WaypointVocab> {
        Ok(WaypointVocab::new(
            self.x_bins,
            self.y_bins,
            (self.x_range[0], self.x_range[1]),
            (self.y_range[0], self.y_range[1]),
        )?)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            repr: self.repr,
            mode: if self.interleave { LayoutMode::Interleaved } else { LayoutMode::NonInterleaved },
            cameras: self.cameras,
            timesteps: self.timesteps,
            horizon: self.horizon,
            history_len: self.history_len,
            patchifier: PatchifierConfig {
                image_height: self.image_height,
                image_width: self.image_width,
                patch_size: self.patch_size,
                d_enc: self.d_enc,
                depth: self.patchifier_depth,
                heads: self.heads,
                frozen_stage1: true,
            },
            encoder: EncoderConfig { k: self.k, layers: self.layers, heads: self.heads, d_enc: self.d_enc, variant: self.variant },
            baseline_grid: self.baseline_grid.map(|[r, c]| (r, c)),
            d_llm: self.d_llm,
            policy_blocks: self.policy_blocks,
            policy_heads: self.policy_heads,
            vocab: self.vocab()?,
        })
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            cameras: self.cameras,
            timesteps: self.timesteps,
            horizon: self.horizon,
            history_len: self.history_len,
            image_height: self.image_height,
            image_width: self.image_width,
            ..WorldConfig::default()
        }
    }

    pub fn dataset_header(&self, clips: u64) -> DatasetHeader {
        DatasetHeader {
            world: self.world(),
            seed: self.seed,
            clips,
            train_stride: self.train_stride,
            eval_stride: self.eval_stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlexError::Config(m));
        if !(self.lr_stage1 > 0.0) || !(self.lr_stage2 > 0.0) || self.lr_stage2 >= self.lr_stage1 {
            return bad(format!("need 0 < lr_stage2 ({}) < lr_stage1 ({})", self.lr_stage2, self.lr_stage1));
        }
        if self.warmup > self.stage1_steps {
            return bad(format!("warmup {} exceeds stage-1 steps {}", self.warmup, self.stage1_steps));
        }
        if self.batch_size == 0 || self.samples == 0 || self.bench_reps == 0 || self.bench_iters == 0 {
            return bad("batch_size, samples, bench_iters and bench_reps must be positive".into());
        }
        if !(self.temperature >= 0.0) {
            return bad(format!("temperature {} must be non-negative", self.temperature));
        }
        if self.train_stride == 0 || self.eval_stride == 0 {
            return bad("frame strides must be positive".into());
        }
        self.world().validate()?;
        self.model()?.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::dataset::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}
