//! Image → token grid, grid resizing and the uncompressed baseline scene.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffArray, Init, ParamId, ParamStore, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Block, Linear, Mlp};

/// Prefix of every patchifier parameter name.
pub const PATCHIFIER_PREFIX: &str = "patchifier.";

/// The tokens of one image, tagged with where they came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    /// `[rows * cols, width]`, row-major over the patch grid.
    pub tokens: Var,
    pub rows: usize,
    pub cols: usize,
    pub camera_id: u32,
    pub timestep_index: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchifierConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub d_enc: usize,
    /// Self-attention blocks after the linear patch embedding.
    pub depth: usize,
    pub heads: usize,
    /// Keep the patchifier fixed during the first training stage.
    pub frozen_stage1: bool,
}

impl Default for PatchifierConfig {
    fn default() -> Self {
        Self { image_height: 32, image_width: 64, patch_size: 8, d_enc: 64, depth: 0, heads: 4, frozen_stage1: true }
    }
}

impl PatchifierConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config(format!(
                "patchifier: {}x{} image is not divisible into {p}x{p} patches",
                self.image_height, self.image_width
            )));
        }
        if self.d_enc == 0 || (self.depth > 0 && (self.heads == 0 || self.d_enc % self.heads != 0)) {
            return Err(Error::Config(format!("patchifier: width {} with {} heads", self.d_enc, self.heads)));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn tokens_per_image(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Linear patch embedding plus a learned per-patch position table and
/// optional transformer blocks.
#[derive(Debug, Clone)]
pub struct Patchifier {
    pub config: PatchifierConfig,
    pub embed: Linear,
    pub position: ParamId,
    pub blocks: Vec<Block>,
}

impl Patchifier {
    pub fn new(store: &mut ParamStore, config: PatchifierConfig) -> Result<Self> {
        config.validate()?;
        let p = PATCHIFIER_PREFIX;
        let embed = Linear::new(store, &format!("{p}embed"), config.patch_len(), config.d_enc)?;
        let position = store.add(
            &format!("{p}position"),
            &[config.tokens_per_image(), config.d_enc],
            Init::FanIn(config.d_enc),
        )?;
        let blocks = (0..config.depth)
            .map(|i| Block::new(store, &format!("{p}block{i}"), config.d_enc, config.heads))
            .collect::<Result<_>>()?;
        Ok(Self { config, embed, position, blocks })
    }

    fn extract_patches(&self, image: &[f32], out: &mut Vec<f32>) -> Result<()> {
        let c = &self.config;
        let (h, w, p) = (c.image_height, c.image_width, c.patch_size);
        if image.len() != h * w * 3 {
            return Err(shape_err("patchify", format!("image of {} values, expected {h}x{w}x3", image.len())));
        }
        let (rows, cols) = c.grid();
        for r in 0..rows {
            for col in 0..cols {
                for py in 0..p {
                    let start = ((r * p + py) * w + col * p) * 3;
                    out.extend_from_slice(&image[start..start + p * 3]);
                }
            }
        }
        Ok(())
    }

    pub fn patchify(&self, tape: &mut Tape, image: &[f32], camera_id: u32, timestep_index: usize) -> Result<TokenGrid> {
        Ok(self.patchify_all(tape, &[(image, camera_id, timestep_index)])?[0])
    }

    /// Patchifies several images with one shared embedding matmul.
    pub fn patchify_all(&self, tape: &mut Tape, images: &[(&[f32], u32, usize)]) -> Result<Vec<TokenGrid>> {
        let n = self.config.tokens_per_image();
        let mut patches = Vec::with_capacity(images.len() * n * self.config.patch_len());
        for (img, _, _) in images {
            self.extract_patches(img, &mut patches)?;
        }
        let x = tape.constant(DiffArray::new(&[images.len() * n, self.config.patch_len()], patches)?);
        let x = self.embed.forward(tape, x)?;
        let x = tape.reshape(x, &[images.len(), n, self.config.d_enc])?;
        let pos = tape.param(self.position);
        let x = tape.add(x, pos)?;
        let x = tape.reshape(x, &[images.len() * n, self.config.d_enc])?;
        let (rows, cols) = self.config.grid();
        images
            .iter()
            .enumerate()
            .map(|(i, &(_, camera_id, timestep_index))| {
                let mut tokens = if images.len() == 1 { x } else { tape.slice_rows(x, i * n, n)? };
                for b in &self.blocks {
                    tokens = b.forward(tape, tokens, None)?.out;
                }
                Ok(TokenGrid { tokens, rows, cols, camera_id, timestep_index })
            })
            .collect()
    }
}

fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (s - lo as f64) as f32)
        })
        .collect()
}

/// `[dst_rows*dst_cols, src_rows*src_cols]` bilinear interpolation matrix
/// (half-pixel centers, edge clamped).
pub fn resize_matrix(src: (usize, usize), dst: (usize, usize)) -> Vec<f32> {
    let (wr, wc) = (axis_weights(src.0, dst.0), axis_weights(src.1, dst.1));
    let mut m = vec![0.0f32; dst.0 * dst.1 * src.0 * src.1];
    let width = src.0 * src.1;
    for (i, &(r0, r1, fr)) in wr.iter().enumerate() {
        for (j, &(c0, c1, fc)) in wc.iter().enumerate() {
            let row = &mut m[(i * dst.1 + j) * width..][..width];
            row[r0 * src.1 + c0] += (1.0 - fr) * (1.0 - fc);
            row[r0 * src.1 + c1] += (1.0 - fr) * fc;
            row[r1 * src.1 + c0] += fr * (1.0 - fc);
            row[r1 * src.1 + c1] += fr * fc;
        }
    }
    m
}

/// Bilinear resize over the 2-D token grid, per channel.
pub fn resize_tokens(tape: &mut Tape, grid: TokenGrid, target: (usize, usize)) -> Result<TokenGrid> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::Config(format!("resize target {:?} must be at least 1x1", target)));
    }
    if target == (grid.rows, grid.cols) {
        return Ok(grid);
    }
    let m = resize_matrix((grid.rows, grid.cols), target);
    let m = tape.constant(DiffArray::new(&[target.0 * target.1, grid.len()], m)?);
    let tokens = tape.matmul(m, grid.tokens)?;
    Ok(TokenGrid { tokens, rows: target.0, cols: target.1, ..grid })
}

/// Projection from encoder width to policy width.
pub type Projector = Mlp;

pub fn projector(store: &mut ParamStore, name: &str, d_enc: usize, d_llm: usize) -> Result<Projector> {
    Mlp::new(store, name, d_enc, d_llm, d_llm)
}

/// Sorts grids by `(timestep, camera)`, checks they share a size, concatenates
/// and projects them: the uncompressed scene, `[C*T*N', D_llm]`.
pub fn baseline_scene(tape: &mut Tape, grids: &[TokenGrid], proj: &Projector) -> Result<Var> {
    let first = grids.first().ok_or_else(|| shape_err("baseline_scene", "no grids".into()))?;
    if let Some(g) = grids.iter().find(|g| g.len() != first.len()) {
        return Err(shape_err(
            "baseline_scene",
            format!("grid for camera {} t {} has {} tokens, expected {}", g.camera_id, g.timestep_index, g.len(), first.len()),
        ));
    }
    let mut order: Vec<&TokenGrid> = grids.iter().collect();
    order.sort_by_key(|g| (g.timestep_index, g.camera_id));
    let parts: Vec<Var> = order.iter().map(|g| g.tokens).collect();
    let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    proj.forward(tape, x)
}
