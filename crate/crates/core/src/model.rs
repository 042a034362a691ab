//! The full model: patchifier, scene representation, history token and policy.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mask, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::patchify::{baseline_scene, projector, resize_tokens, PatchifierConfig, Patchifier, Projector, TokenGrid};
use crate::policy::{
    build_interleaved_mask, build_layout, LayoutConfig, LayoutMode, Policy, PolicyConfig, PolicyInput, Representation,
    SampleContext, SequenceLayout,
};
use crate::rng::Rng;
use crate::scene::{AttentionRecord, EncoderConfig, SceneEncoder};
use crate::train::loss_targets;
use crate::trajectory::{HistoryEncoder, WaypointVocab};
use crate::worldsim::Clip;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub repr: Representation,
    pub mode: LayoutMode,
    pub cameras: usize,
    pub timesteps: usize,
    pub horizon: usize,
    pub history_len: usize,
    pub patchifier: PatchifierConfig,
    pub encoder: EncoderConfig,
    /// Baseline token grid per image after resizing; `None` keeps the
    /// patchifier's native grid.
    pub baseline_grid: Option<(usize, usize)>,
    pub d_llm: usize,
    pub policy_blocks: usize,
    pub policy_heads: usize,
    pub vocab: WaypointVocab,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            repr: Representation::Flex,
            mode: LayoutMode::Interleaved,
            cameras: 2,
            timesteps: 9,
            horizon: 10,
            history_len: 4,
            patchifier: PatchifierConfig::default(),
            encoder: EncoderConfig::default(),
            baseline_grid: None,
            d_llm: 128,
            policy_blocks: 3,
            policy_heads: 4,
            vocab: WaypointVocab::default(),
        }
    }
}

impl ModelConfig {
    pub fn baseline_grid(&self) -> (usize, usize) {
        self.baseline_grid.unwrap_or_else(|| self.patchifier.grid())
    }

    /// Scene rows fed to the policy per timestep.
    pub fn scene_per_step(&self) -> usize {
        match self.repr {
            Representation::Flex => self.encoder.k / self.timesteps.max(1),
            Representation::Baseline => {
                let (r, c) = self.baseline_grid();
                self.cameras * r * c
            }
        }
    }

    /// Visual tokens the policy sees per clip.
    pub fn policy_scene_tokens(&self) -> usize {
        self.scene_per_step() * self.timesteps
    }

    pub fn layout_config(&self) -> LayoutConfig {
        LayoutConfig { timesteps: self.timesteps, scene_per_step: self.scene_per_step(), horizon: self.horizon }
    }

    pub fn validate(&self) -> Result<()> {
        self.patchifier.validate()?;
        self.vocab.validate()?;
        if self.cameras == 0 || self.timesteps == 0 || self.horizon < 2 || self.history_len == 0 {
            return Err(Error::Config(format!(
                "model: C={} T={} H={} history={}",
                self.cameras, self.timesteps, self.horizon, self.history_len
            )));
        }
        if self.encoder.d_enc != self.patchifier.d_enc {
            return Err(Error::Config(format!(
                "encoder width {} differs from patchifier width {}",
                self.encoder.d_enc, self.patchifier.d_enc
            )));
        }
        if let Some((r, c)) = self.baseline_grid {
            if r == 0 || c == 0 {
                return Err(Error::Config("baseline grid must be at least 1x1".into()));
            }
        }
        if self.repr == Representation::Flex {
            self.encoder.validate(self.cameras, self.timesteps)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum SceneHead {
    Flex { encoder: SceneEncoder, proj: Linear },
    Baseline { proj: Projector },
}

/// A complete predictor. Parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct FlexModel {
    pub config: ModelConfig,
    pub patchifier: Patchifier,
    head: SceneHead,
    pub history: HistoryEncoder,
    pub policy: Policy,
    pub layout: SequenceLayout,
    pub mask: Mask,
}

impl FlexModel {
    pub fn new(store: &mut ParamStore, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let patchifier = Patchifier::new(store, config.patchifier)?;
        let d_enc = config.patchifier.d_enc;
        let head = match config.repr {
            Representation::Flex => SceneHead::Flex {
                encoder: SceneEncoder::new(store, "encoder", config.encoder)?,
                proj: Linear::new(store, "scene_proj", d_enc, config.d_llm)?,
            },
            Representation::Baseline => {
                SceneHead::Baseline { proj: projector(store, "baseline_proj", d_enc, config.d_llm)? }
            }
        };
        let history = HistoryEncoder::new(store, "history", config.history_len, config.d_llm, config.d_llm)?;
        let layout = build_layout(config.mode, config.repr, config.layout_config());
        let mask = build_interleaved_mask(&layout)?;
        let policy = Policy::new(
            store,
            "policy",
            PolicyConfig {
                d_llm: config.d_llm,
                blocks: config.policy_blocks,
                heads: config.policy_heads,
                max_positions: layout.max_position() + 1,
                vocab: config.vocab,
            },
        )?;
        Ok(Self { config, patchifier, head, history, policy, layout, mask })
    }

    pub fn encoder(&self) -> Option<&SceneEncoder> {
        match &self.head {
            SceneHead::Flex { encoder, .. } => Some(encoder),
            SceneHead::Baseline { .. } => None,
        }
    }

    fn check_clip(&self, clip: &Clip) -> Result<()> {
        let c = &self.config;
        if clip.cameras != c.cameras
            || clip.timesteps != c.timesteps
            || clip.horizon != c.horizon
            || clip.history_len != c.history_len
            || clip.height != c.patchifier.image_height
            || clip.width != c.patchifier.image_width
        {
            return Err(Error::Config(format!(
                "clip {} is C={} T={} H={} h={} {}x{}, model expects C={} T={} H={} h={} {}x{}",
                clip.id,
                clip.cameras,
                clip.timesteps,
                clip.horizon,
                clip.history_len,
                clip.height,
                clip.width,
                c.cameras,
                c.timesteps,
                c.horizon,
                c.history_len,
                c.patchifier.image_height,
                c.patchifier.image_width
            )));
        }
        Ok(())
    }

    /// Token grids of every image of `clip`, `(t, c)` order.
    pub fn grids(&self, tape: &mut Tape, clip: &Clip) -> Result<Vec<TokenGrid>> {
        self.check_clip(clip)?;
        let images: Vec<(&[f32], u32, usize)> = (0..clip.timesteps)
            .flat_map(|t| (0..clip.cameras).map(move |c| (t, c)))
            .map(|(t, c)| (clip.image(c, t), clip.camera_ids[c], t))
            .collect();
        self.patchifier.patchify_all(tape, &images)
    }

    /// Scene rows for the policy, `[T * scene_per_step, D]`, and the camera
    /// slot of every row on the baseline path.
    pub fn scene(&self, tape: &mut Tape, clip: &Clip) -> Result<(Var, Option<Vec<u32>>)> {
        let grids = self.grids(tape, clip)?;
        match &self.head {
            SceneHead::Flex { encoder, proj } => {
                let s = encoder.encode(tape, &grids)?;
                Ok((proj.forward(tape, s.values)?, None))
            }
            SceneHead::Baseline { proj } => {
                let target = self.config.baseline_grid();
                let resized = grids
                    .into_iter()
                    .map(|g| resize_tokens(tape, g, target))
                    .collect::<Result<Vec<_>>>()?;
                let cams = resized.iter().flat_map(|g| core::iter::repeat(g.camera_id).take(g.len())).collect();
                Ok((baseline_scene(tape, &resized, proj)?, Some(cams)))
            }
        }
    }

    /// Waypoint targets for every timestep.
    pub fn targets(&self, clip: &Clip) -> Vec<Vec<u32>> {
        (0..clip.timesteps).map(|k| self.config.vocab.discretize(clip.future_at(k))).collect()
    }

    pub fn policy_input(&self, tape: &mut Tape, clip: &Clip) -> Result<PolicyInput> {
        let (scene, scene_cameras) = self.scene(tape, clip)?;
        let histories: Vec<_> = (0..clip.timesteps).map(|k| clip.history_at(k)).collect();
        let history = self.history.encode_many(tape, &histories)?;
        Ok(PolicyInput { scene, scene_cameras, history, futures: self.targets(clip) })
    }

    /// `[total_len, V]` logits of the packed training sequence.
    pub fn logits(&self, tape: &mut Tape, clip: &Clip) -> Result<Var> {
        let input = self.policy_input(tape, clip)?;
        let x = self.policy.embed_sequence(tape, &self.layout, &input)?;
        self.policy.forward(tape, x, &self.mask)
    }

    /// Training loss of one clip under the configured layout.
    pub fn loss(&self, tape: &mut Tape, clip: &Clip) -> Result<Var> {
        let input = self.policy_input(tape, clip)?;
        let x = self.policy.embed_sequence(tape, &self.layout, &input)?;
        let (rows, ids) = loss_targets(&self.layout, &input.futures)?;
        let logits = self.policy.forward_rows(tape, x, &self.mask, &rows)?;
        tape.cross_entropy(logits, &ids)
    }

    /// `k` predicted futures for the final timestep, in metres.
    pub fn predict(&self, store: &ParamStore, clip: &Clip, k: usize, temperature: f32, rng: &mut Rng) -> Result<Vec<Vec<[f32; 2]>>> {
        let ids = self.sample_ids(store, clip, k, temperature, rng)?;
        ids.iter().map(|t| self.config.vocab.detokenize(t)).collect()
    }

    pub fn sample_ids(&self, store: &ParamStore, clip: &Clip, k: usize, temperature: f32, rng: &mut Rng) -> Result<Vec<Vec<u32>>> {
        let mut tape = Tape::no_grad(store);
        let (scene, scene_cameras) = self.scene(&mut tape, clip)?;
        let history = self.history.encode(&mut tape, clip.history())?;
        let input = PolicyInput { scene, scene_cameras, history, futures: Vec::new() };
        let c = &self.config;
        let ctx = SampleContext::new(&self.policy, &mut tape, &input, c.timesteps, c.scene_per_step(), c.horizon)?;
        self.policy.sample(&mut tape, &ctx, k, temperature, rng)
    }

    /// Final-layer scene→image attention of the encoder on `clip`.
    pub fn attention_record(&self, store: &ParamStore, clip: &Clip) -> Result<AttentionRecord> {
        let encoder = self.encoder().ok_or_else(|| Error::Config("baseline model has no scene encoder".into()))?;
        let mut tape = Tape::no_grad(store);
        let grids = self.grids(&mut tape, clip)?;
        Ok(encoder.attention_record(&mut tape, &grids)?.1)
    }
}
