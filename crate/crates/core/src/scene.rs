//! Joint scene encoder: K learned scene tokens attend together with every
//! image token from every camera and timestep, and only the scene tokens are
//! kept.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffArray, Init, ParamId, ParamStore, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Block, CrossBlock, Mlp};
use crate::patchify::TokenGrid;
use crate::worldsim::MAX_CAMERAS;

/// Timestep and camera embeddings added to image tokens before encoding.
#[derive(Debug, Clone, Copy)]
pub struct PositionalEmbeddings {
    pub time_mlp: Mlp,
    /// `[MAX_CAMERAS, d]`
    pub camera: ParamId,
    pub freq_dim: usize,
    pub dim: usize,
}

/// Sinusoidal features of an integer timestep, `[sin | cos]` halves.
pub fn timestep_features(t: usize, freq_dim: usize) -> Vec<f32> {
    let half = freq_dim / 2;
    let mut out = alloc::vec![0.0f32; freq_dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin() as f32;
        out[half + i] = a.cos() as f32;
    }
    out
}

impl PositionalEmbeddings {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let freq_dim = dim.max(2) & !1;
        Ok(Self {
            time_mlp: Mlp::new(store, &format!("{name}.time"), freq_dim, dim, dim)?,
            camera: store.add(&format!("{name}.camera"), &[MAX_CAMERAS, dim], Init::FanIn(dim))?,
            freq_dim,
            dim,
        })
    }

    /// `[timesteps.len(), dim]` time embeddings.
    pub fn time_embed(&self, tape: &mut Tape, timesteps: &[usize]) -> Result<Var> {
        let feats: Vec<f32> = timesteps.iter().flat_map(|&t| timestep_features(t, self.freq_dim)).collect();
        let x = tape.constant(DiffArray::new(&[timesteps.len(), self.freq_dim], feats)?);
        self.time_mlp.forward(tape, x)
    }

    pub fn add_positional(&self, tape: &mut Tape, grid: TokenGrid) -> Result<TokenGrid> {
        Ok(self.add_positional_all(tape, &[grid])?[0])
    }

    /// Adds `time(t) + cam(c)` to every token of every grid.
    pub fn add_positional_all(&self, tape: &mut Tape, grids: &[TokenGrid]) -> Result<Vec<TokenGrid>> {
        if let Some(g) = grids.iter().find(|g| g.camera_id as usize >= MAX_CAMERAS) {
            return Err(Error::UnknownCamera(g.camera_id as usize));
        }
        let mut steps: Vec<usize> = grids.iter().map(|g| g.timestep_index).collect();
        steps.sort_unstable();
        steps.dedup();
        let time = self.time_embed(tape, &steps)?;
        let cam = tape.param(self.camera);
        grids
            .iter()
            .map(|g| {
                let ti = steps.binary_search(&g.timestep_index).expect("collected above");
                let n = g.len();
                let te = tape.gather_rows(time, &alloc::vec![ti; n])?;
                let ce = tape.gather_rows(cam, &alloc::vec![g.camera_id as usize; n])?;
                let off = tape.add(te, ce)?;
                let tokens = tape.add(g.tokens, off)?;
                Ok(TokenGrid { tokens, ..*g })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Self-attention over scene and all image tokens together.
    JointSelf,
    /// Scene tokens cross-attend to all image tokens; image tokens stay fixed.
    JointCross,
    /// Each image is self-attended with its own slice of scene tokens.
    PerImageSelf,
    /// Each slice of scene tokens cross-attends to its own image.
    PerImageCross,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 4] =
        [EncoderVariant::PerImageCross, EncoderVariant::PerImageSelf, EncoderVariant::JointCross, EncoderVariant::JointSelf];

    pub fn name(self) -> &'static str {
        match self {
            EncoderVariant::JointSelf => "joint_self",
            EncoderVariant::JointCross => "joint_cross",
            EncoderVariant::PerImageSelf => "per_image_self",
            EncoderVariant::PerImageCross => "per_image_cross",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn per_image(self) -> bool {
        matches!(self, EncoderVariant::PerImageSelf | EncoderVariant::PerImageCross)
    }

    pub fn cross(self) -> bool {
        matches!(self, EncoderVariant::JointCross | EncoderVariant::PerImageCross)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub k: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_enc: usize,
    pub variant: EncoderVariant,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { k: 90, layers: 4, heads: 4, d_enc: 64, variant: EncoderVariant::JointSelf }
    }
}

impl EncoderConfig {
    /// Checks divisibility against a rig of `cameras × timesteps` images.
    pub fn validate(&self, cameras: usize, timesteps: usize) -> Result<()> {
        if self.k == 0 || self.d_enc == 0 || self.heads == 0 || self.d_enc % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder: K {} width {} heads {}",
                self.k, self.d_enc, self.heads
            )));
        }
        if timesteps == 0 || self.k % timesteps != 0 {
            return Err(Error::Config(format!("encoder: K={} is not divisible by T={timesteps}", self.k)));
        }
        if self.variant.per_image() && self.k % (cameras * timesteps) != 0 {
            return Err(Error::Config(format!(
                "encoder: {} needs K={} divisible by C*T={}",
                self.variant.name(),
                self.k,
                cameras * timesteps
            )));
        }
        Ok(())
    }
}

/// Encoder output: `values` is `[K, d_enc]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneTokens {
    pub values: Var,
    pub k: usize,
}

#[derive(Debug, Clone)]
enum Layers {
    SelfAttn(Vec<Block>),
    Cross(Vec<CrossBlock>),
}

/// Where each image's tokens sit among the encoder keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSlot {
    pub camera_id: u32,
    pub timestep_index: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Final-layer scene→image attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub heads: usize,
    pub k: usize,
    /// Image tokens in key order, `(t, c)`-sorted.
    pub slots: Vec<ImageSlot>,
    /// `[heads, K, keys]`, row-major.
    pub weights: Vec<f32>,
}

impl AttentionRecord {
    pub fn keys(&self) -> usize {
        self.slots.iter().map(|s| s.rows * s.cols).sum()
    }

    pub fn at(&self, head: usize, token: usize, key: usize) -> f32 {
        self.weights[(head * self.k + token) * self.keys() + key]
    }
}

#[derive(Debug, Clone)]
pub struct SceneEncoder {
    pub config: EncoderConfig,
    pub scene_init: ParamId,
    pub positional: PositionalEmbeddings,
    layers: Layers,
}

/// Encoder run with the per-layer attention probabilities kept.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub scene: SceneTokens,
    /// Per layer; for joint self-attention each is `[heads, K+M, K+M]`.
    pub probs: Vec<Var>,
    /// Image grids after positional embedding, `(t, c)` order.
    pub inputs: Vec<TokenGrid>,
}

impl SceneEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: EncoderConfig) -> Result<Self> {
        let d = config.d_enc;
        let scene_init = store.add(&format!("{name}.scene_init"), &[config.k, d], Init::FanIn(d))?;
        let positional = PositionalEmbeddings::new(store, &format!("{name}.pe"), d)?;
        let layers = if config.variant.cross() {
            Layers::Cross(
                (0..config.layers)
                    .map(|i| CrossBlock::new(store, &format!("{name}.layer{i}"), d, config.heads))
                    .collect::<Result<_>>()?,
            )
        } else {
            Layers::SelfAttn(
                (0..config.layers)
                    .map(|i| Block::new(store, &format!("{name}.layer{i}"), d, config.heads))
                    .collect::<Result<_>>()?,
            )
        };
        Ok(Self { config, scene_init, positional, layers })
    }

    pub fn encode(&self, tape: &mut Tape, grids: &[TokenGrid]) -> Result<SceneTokens> {
        Ok(self.encode_recorded(tape, grids)?.scene)
    }

    /// Runs the configured variant over `grids` (any order; sorted by `(t, c)`).
    pub fn encode_recorded(&self, tape: &mut Tape, grids: &[TokenGrid]) -> Result<Encoded> {
        let (cams, steps) = rig_extent(grids)?;
        self.config.validate(cams, steps)?;
        if let Some(g) = grids.iter().find(|g| tape.shape(g.tokens).last() != Some(&self.config.d_enc)) {
            return Err(shape_err(
                "encode",
                format!("grid tokens {:?}, encoder width {}", tape.shape(g.tokens), self.config.d_enc),
            ));
        }
        let mut sorted: Vec<TokenGrid> = grids.to_vec();
        sorted.sort_by_key(|g| (g.timestep_index, g.camera_id));
        let inputs = self.positional.add_positional_all(tape, &sorted)?;
        let init = tape.param(self.scene_init);
        let k = self.config.k;
        let mut probs = Vec::new();
        let values = if self.config.variant.per_image() {
            let per = k / inputs.len();
            let mut outs = Vec::with_capacity(inputs.len());
            for (i, g) in inputs.iter().enumerate() {
                let s0 = tape.slice_rows(init, i * per, per)?;
                outs.push(self.run(tape, s0, &[g.tokens], &mut probs)?);
            }
            tape.concat_rows(&outs)?
        } else {
            let tokens: Vec<Var> = inputs.iter().map(|g| g.tokens).collect();
            self.run(tape, init, &tokens, &mut probs)?
        };
        Ok(Encoded { scene: SceneTokens { values, k }, probs, inputs })
    }

    fn run(&self, tape: &mut Tape, s0: Var, images: &[Var], probs: &mut Vec<Var>) -> Result<Var> {
        let n_scene = tape.shape(s0)[0];
        match &self.layers {
            Layers::SelfAttn(blocks) => {
                let mut parts = alloc::vec![s0];
                parts.extend_from_slice(images);
                let mut x = tape.concat_rows(&parts)?;
                for b in blocks {
                    let a = b.forward(tape, x, None)?;
                    probs.push(a.probs);
                    x = a.out;
                }
                tape.slice_rows(x, 0, n_scene)
            }
            Layers::Cross(blocks) => {
                let context = if images.len() == 1 { images[0] } else { tape.concat_rows(images)? };
                let mut s = s0;
                for b in blocks {
                    let a = b.forward(tape, s, context)?;
                    probs.push(a.probs);
                    s = a.out;
                }
                Ok(s)
            }
        }
    }

    /// Final-layer attention from scene-token queries to image-token keys,
    /// restricted from the full attention matrix.
    pub fn attention_record(&self, tape: &mut Tape, grids: &[TokenGrid]) -> Result<(SceneTokens, AttentionRecord)> {
        if self.config.variant.per_image() {
            return Err(Error::Config(format!(
                "{} has no joint scene-to-image attention to record",
                self.config.variant.name()
            )));
        }
        let enc = self.encode_recorded(tape, grids)?;
        let last = *enc
            .probs
            .last()
            .ok_or_else(|| Error::Config("encoder has no layers to record".into()))?;
        let shape = tape.shape(last).to_vec();
        let (heads, rows, cols) = (shape[0], shape[1], shape[2]);
        let k = self.config.k;
        let key_start = if self.config.variant.cross() { 0 } else { k };
        let m = cols - key_start;
        let data = tape.data(last);
        let mut weights = Vec::with_capacity(heads * k * m);
        for h in 0..heads {
            for q in 0..k {
                let row = (h * rows + q) * cols;
                weights.extend_from_slice(&data[row + key_start..row + cols]);
            }
        }
        let slots = enc
            .inputs
            .iter()
            .map(|g| ImageSlot { camera_id: g.camera_id, timestep_index: g.timestep_index, rows: g.rows, cols: g.cols })
            .collect();
        Ok((enc.scene, AttentionRecord { heads, k, slots, weights }))
    }
}

/// `(cameras, timesteps)` spanned by a full `C × T` grid set.
pub fn rig_extent(grids: &[TokenGrid]) -> Result<(usize, usize)> {
    if grids.is_empty() {
        return Err(shape_err("encode", "no image grids".into()));
    }
    let mut cams: Vec<u32> = grids.iter().map(|g| g.camera_id).collect();
    let mut steps: Vec<usize> = grids.iter().map(|g| g.timestep_index).collect();
    cams.sort_unstable();
    cams.dedup();
    steps.sort_unstable();
    steps.dedup();
    if cams.len() * steps.len() != grids.len() {
        return Err(shape_err(
            "encode",
            format!("{} grids do not form a {}x{} camera/timestep rig", grids.len(), cams.len(), steps.len()),
        ));
    }
    Ok((cams.len(), steps.len()))
}
