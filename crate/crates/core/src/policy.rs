//! Autoregressive policy over a packed sequence of scene, history and
//! waypoint tokens.
//!
//! In interleaved mode one sequence carries a prediction problem for every
//! observed timestep: `[start, (scene_1, hist_1, fut_1), …, (scene_T, hist_T, fut_T), end]`.
//! The attention mask and the position ids make the span of timestep `k` see
//! exactly what it would see in the standalone prefix
//! `[start, scene_1..k, hist_k, fut_k]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Init, Mask, ParamId, ParamStore, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Block, LayerNorm, Linear};
use crate::rng::Rng;
use crate::trajectory::WaypointVocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMode {
    Interleaved,
    NonInterleaved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// K compressed scene tokens, split into T chunks.
    Flex,
    /// Every (resized, projected) image token.
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Start,
    SceneChunk,
    ImageTokens,
    History,
    Future,
    End,
}

impl SegmentKind {
    pub fn is_scene(self) -> bool {
        matches!(self, SegmentKind::SceneChunk | SegmentKind::ImageTokens)
    }
}

/// A contiguous run of positions. `timestep` is 1-based for scene, history
/// and future segments and 0 for specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub timestep: usize,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, pos: usize) -> bool {
        (self.start..self.end()).contains(&pos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub timesteps: usize,
    /// Scene rows per timestep: K/T for Flex, C·N′ for the baseline.
    pub scene_per_step: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub mode: LayoutMode,
    pub repr: Representation,
    pub config: LayoutConfig,
    pub segments: Vec<Segment>,
    pub total_len: usize,
}

pub fn build_layout(mode: LayoutMode, repr: Representation, config: LayoutConfig) -> SequenceLayout {
    let scene_kind = match repr {
        Representation::Flex => SegmentKind::SceneChunk,
        Representation::Baseline => SegmentKind::ImageTokens,
    };
    let mut segments = Vec::new();
    let mut pos = 0;
    let mut push = |kind, timestep, len| {
        segments.push(Segment { kind, timestep, start: pos, len });
        pos += len;
    };
    push(SegmentKind::Start, 0, 1);
    let t_n = config.timesteps;
    match mode {
        LayoutMode::Interleaved => {
            for k in 1..=t_n {
                push(scene_kind, k, config.scene_per_step);
                push(SegmentKind::History, k, 1);
                push(SegmentKind::Future, k, config.horizon);
            }
        }
        LayoutMode::NonInterleaved => {
            for k in 1..=t_n {
                push(scene_kind, k, config.scene_per_step);
            }
            push(SegmentKind::History, t_n, 1);
            push(SegmentKind::Future, t_n, config.horizon);
        }
    }
    push(SegmentKind::End, 0, 1);
    SequenceLayout { mode, repr, config, segments, total_len: pos }
}

impl SequenceLayout {
    pub fn segment_at(&self, pos: usize) -> &Segment {
        let i = self.segments.partition_point(|s| s.end() <= pos);
        &self.segments[i]
    }

    pub fn find(&self, kind: SegmentKind, timestep: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind && s.timestep == timestep)
    }

    /// Timesteps that carry a prediction span, in order.
    pub fn supervised_steps(&self) -> Vec<usize> {
        self.segments.iter().filter(|s| s.kind == SegmentKind::Future).map(|s| s.timestep).collect()
    }

    /// Position ids: each span is numbered as in its standalone prefix.
    pub fn position_ids(&self) -> Vec<usize> {
        let s = self.config.scene_per_step;
        let mut ids = Vec::with_capacity(self.total_len);
        for seg in &self.segments {
            for j in 0..seg.len {
                ids.push(match seg.kind {
                    SegmentKind::Start => 0,
                    k if k.is_scene() => 1 + (seg.timestep - 1) * s + j,
                    SegmentKind::History => 1 + seg.timestep * s,
                    SegmentKind::Future => 2 + seg.timestep * s + j,
                    _ => 2 + self.config.timesteps * s + self.config.horizon,
                });
            }
        }
        ids
    }

    pub fn max_position(&self) -> usize {
        2 + self.config.timesteps * self.config.scene_per_step + self.config.horizon
    }

    /// Rows whose outputs predict the future of timestep `k`: the history
    /// token and all but the last future token. Row `i` predicts waypoint `i`.
    pub fn loss_rows(&self, k: usize) -> Result<Vec<usize>> {
        let h = self.find(SegmentKind::History, k).ok_or_else(|| Error::Layout(format!("no history for timestep {k}")))?;
        let f = self.find(SegmentKind::Future, k).ok_or_else(|| Error::Layout(format!("no future for timestep {k}")))?;
        let mut rows = vec![h.start];
        rows.extend(f.start..f.end() - 1);
        Ok(rows)
    }

    /// Checks contiguity, coverage and per-timestep ordering.
    pub fn validate(&self) -> Result<()> {
        let mut pos = 0;
        for s in &self.segments {
            if s.start != pos {
                return Err(Error::Layout(format!("segment {:?} starts at {} not {}", s.kind, s.start, pos)));
            }
            pos = s.end();
        }
        if pos != self.total_len {
            return Err(Error::Layout(format!("segments cover {pos} of {}", self.total_len)));
        }
        for k in self.supervised_steps() {
            let h = self.find(SegmentKind::History, k).ok_or_else(|| Error::Layout(format!("timestep {k}: no history")))?;
            let f = self.find(SegmentKind::Future, k).expect("listed");
            let scene_ok = self.segments.iter().any(|s| s.kind.is_scene() && s.timestep == k && s.end() <= h.start);
            if !scene_ok || h.end() > f.start {
                return Err(Error::Layout(format!("timestep {k}: scene, history, future out of order")));
            }
        }
        Ok(())
    }
}

/// Whether query position `q` may attend to key position `k`.
fn allowed(layout: &SequenceLayout, q: usize, k: usize) -> bool {
    if k > q {
        return false;
    }
    let (sq, sk) = (layout.segment_at(q), layout.segment_at(k));
    match sq.kind {
        SegmentKind::Start | SegmentKind::End => true,
        kind if kind.is_scene() => sk.kind == SegmentKind::Start || sk.kind.is_scene(),
        SegmentKind::History | SegmentKind::Future => match sk.kind {
            SegmentKind::Start => true,
            kind if kind.is_scene() => sk.timestep <= sq.timestep,
            SegmentKind::History => sk.timestep == sq.timestep,
            SegmentKind::Future => sk.timestep == sq.timestep,
            _ => false,
        },
        _ => false,
    }
}

pub fn build_interleaved_mask(layout: &SequenceLayout) -> Result<Mask> {
    layout.validate()?;
    let n = layout.total_len;
    let mask = Mask::from_fn(n, n, |q, k| allowed(layout, q, k));
    if let Some(row) = mask.first_empty_row() {
        return Err(Error::FullyMaskedRow { row });
    }
    Ok(mask)
}

/// Splits `[K, D]` scene rows into `t` consecutive chunks of `K/t`.
pub fn partition_chunks(tape: &mut Tape, scene: Var, t: usize) -> Result<Vec<Var>> {
    let k = tape.shape(scene)[0];
    if t == 0 || k % t != 0 {
        return Err(Error::Config(format!("cannot split {k} scene tokens into {t} chunks")));
    }
    let per = k / t;
    (0..t).map(|i| tape.slice_rows(scene, i * per, per)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub d_llm: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub vocab: WaypointVocab,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { d_llm: 128, blocks: 3, heads: 4, max_positions: 1024, vocab: WaypointVocab::default() }
    }
}

/// Everything the policy conditions on for one clip.
#[derive(Debug, Clone)]
pub struct PolicyInput {
    /// `[T * scene_per_step, D]`, timestep-major.
    pub scene: Var,
    /// Camera slot per scene row (baseline path only).
    pub scene_cameras: Option<Vec<u32>>,
    /// `[T, D]` history tokens (row `k-1` is timestep `k`), or `[1, D]` for
    /// the final timestep only.
    pub history: Var,
    /// Ground-truth waypoint ids per timestep, `T × H` (teacher forcing).
    pub futures: Vec<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub config: PolicyConfig,
    pub token_embed: ParamId,
    pub position_embed: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

impl Policy {
    pub fn new(store: &mut ParamStore, name: &str, config: PolicyConfig) -> Result<Self> {
        config.vocab.validate()?;
        let (d, v) = (config.d_llm, config.vocab.vocab_size());
        if config.heads == 0 || d % config.heads != 0 {
            return Err(Error::Config(format!("policy: width {d} with {} heads", config.heads)));
        }
        Ok(Self {
            config,
            token_embed: store.add(&format!("{name}.token_embed"), &[v, d], Init::FanIn(d))?,
            position_embed: store.add(&format!("{name}.position_embed"), &[config.max_positions, d], Init::FanIn(d))?,
            blocks: (0..config.blocks)
                .map(|i| Block::new(store, &format!("{name}.block{i}"), d, config.heads))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), d)?,
            head: Linear::new(store, &format!("{name}.head"), d, v)?,
        })
    }

    /// Token embeddings of `ids`, `[ids.len(), D]`.
    pub fn embed_tokens(&self, tape: &mut Tape, ids: &[u32]) -> Result<Var> {
        let v = self.config.vocab.vocab_size();
        if let Some(&id) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::OutOfVocab { id, vocab: v });
        }
        let table = tape.param(self.token_embed);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        tape.gather_rows(table, &idx)
    }

    /// Assembles the `[total_len, D]` input sequence for `layout`, position
    /// embeddings included.
    pub fn embed_sequence(&self, tape: &mut Tape, layout: &SequenceLayout, input: &PolicyInput) -> Result<Var> {
        let vocab = &self.config.vocab;
        let d = self.config.d_llm;
        let lc = layout.config;
        let scene_rows = lc.timesteps * lc.scene_per_step;
        if tape.shape(input.scene) != [scene_rows, d] {
            return Err(shape_err("embed_sequence", format!("scene {:?}, layout wants [{scene_rows}, {d}]", tape.shape(input.scene))));
        }
        let hist_rows = tape.shape(input.history)[0];
        let steps = layout.supervised_steps();
        let mut scene = input.scene;
        if let Some(cams) = &input.scene_cameras {
            if cams.len() != scene_rows {
                return Err(shape_err("embed_sequence", format!("{} camera tags for {scene_rows} rows", cams.len())));
            }
            let ids = cams.iter().map(|&c| vocab.camera_token(c as usize)).collect::<Result<Vec<_>>>()?;
            let ce = self.embed_tokens(tape, &ids)?;
            scene = tape.add(scene, ce)?;
        }
        // Token rows: start, end, then every needed future token.
        let mut tokens = vec![vocab.start_token(), vocab.end_token()];
        let mut fut_base = Vec::new();
        for &k in &steps {
            let f = input
                .futures
                .get(k - 1)
                .filter(|f| f.len() == lc.horizon)
                .ok_or_else(|| Error::Layout(format!("missing {}-token future for timestep {k}", lc.horizon)))?;
            fut_base.push(tokens.len());
            tokens.extend_from_slice(f);
        }
        let tok = self.embed_tokens(tape, &tokens)?;
        let source = tape.concat_rows(&[scene, input.history, tok])?;
        let (hist_off, tok_off) = (scene_rows, scene_rows + hist_rows);
        let mut index = Vec::with_capacity(layout.total_len);
        for seg in &layout.segments {
            for j in 0..seg.len {
                index.push(match seg.kind {
                    SegmentKind::Start => tok_off,
                    SegmentKind::End => tok_off + 1,
                    kind if kind.is_scene() => (seg.timestep - 1) * lc.scene_per_step + j,
                    SegmentKind::History => {
                        let row = if hist_rows == 1 {
                            0
                        } else if seg.timestep <= hist_rows {
                            seg.timestep - 1
                        } else {
                            return Err(Error::Layout(format!("no history token for timestep {}", seg.timestep)));
                        };
                        hist_off + row
                    }
                    _ => {
                        let i = steps.iter().position(|&s| s == seg.timestep).expect("listed");
                        tok_off + fut_base[i] + j
                    }
                });
            }
        }
        let x = tape.gather_rows(source, &index)?;
        self.add_positions(tape, x, &layout.position_ids())
    }

    pub fn add_positions(&self, tape: &mut Tape, x: Var, positions: &[usize]) -> Result<Var> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_positions) {
            return Err(Error::Config(format!(
                "position {p} exceeds the policy's {} positions",
                self.config.max_positions
            )));
        }
        let table = tape.param(self.position_embed);
        let pe = tape.gather_rows(table, positions)?;
        tape.add(x, pe)
    }

    /// Final hidden states `[L, D]` of a sequence under `mask`.
    pub fn hidden(&self, tape: &mut Tape, x: Var, mask: &Mask) -> Result<Var> {
        let n = tape.shape(x)[0];
        if mask.rows() != n || mask.cols() != n {
            return Err(shape_err("policy", format!("mask {}x{} for {n} positions", mask.rows(), mask.cols())));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, h, Some(mask))?.out;
        }
        self.ln_f.forward(tape, h)
    }

    pub fn logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        self.head.forward(tape, hidden)
    }

    /// `[L, V]` logits for every position.
    pub fn forward(&self, tape: &mut Tape, x: Var, mask: &Mask) -> Result<Var> {
        let h = self.hidden(tape, x, mask)?;
        self.logits(tape, h)
    }

    /// Logits at selected rows only.
    pub fn forward_rows(&self, tape: &mut Tape, x: Var, mask: &Mask, rows: &[usize]) -> Result<Var> {
        let h = self.hidden(tape, x, mask)?;
        let h = tape.gather_rows(h, rows)?;
        self.logits(tape, h)
    }

    /// `k` autoregressive rollouts of `horizon` waypoint tokens after the
    /// final-timestep context. Temperature 0 is greedy.
    pub fn sample(
        &self,
        tape: &mut Tape,
        context: &SampleContext,
        k: usize,
        temperature: f32,
        rng: &mut Rng,
    ) -> Result<Vec<Vec<u32>>> {
        if k == 0 {
            return Err(Error::Config("need at least one sample".into()));
        }
        let rollouts = if temperature <= 0.0 { 1 } else { k };
        let mut out = Vec::with_capacity(k);
        for _ in 0..rollouts {
            out.push(self.rollout(tape, context, temperature, rng)?);
        }
        while out.len() < k {
            out.push(out[0].clone());
        }
        Ok(out)
    }

    fn rollout(&self, tape: &mut Tape, ctx: &SampleContext, temperature: f32, rng: &mut Rng) -> Result<Vec<u32>> {
        let waypoints = self.config.vocab.waypoint_count() as usize;
        let mut ids: Vec<u32> = Vec::with_capacity(ctx.horizon);
        for _ in 0..ctx.horizon {
            let mark = tape.len();
            let mut x = ctx.prefix;
            let mut positions = ctx.prefix_positions.clone();
            if !ids.is_empty() {
                let e = self.embed_tokens(tape, &ids)?;
                x = tape.concat_rows(&[x, e])?;
                positions.extend((0..ids.len()).map(|j| ctx.future_position + j));
            }
            let x = self.add_positions(tape, x, &positions)?;
            let n = positions.len();
            let mask = Mask::causal(n);
            let logits = self.forward_rows(tape, x, &mask, &[n - 1])?;
            let row = &tape.data(logits)[..waypoints];
            let id = pick(row, temperature, rng);
            ids.push(id as u32);
            tape.truncate(mark);
        }
        Ok(ids)
    }
}

/// Final-timestep context for sampling: `[start, scene_1..T, hist_T]`
/// embeddings without position embeddings.
#[derive(Debug, Clone)]
pub struct SampleContext {
    pub prefix: Var,
    pub prefix_positions: Vec<usize>,
    pub prefix_rows: usize,
    pub future_position: usize,
    pub horizon: usize,
}

impl SampleContext {
    pub fn new(policy: &Policy, tape: &mut Tape, input: &PolicyInput, timesteps: usize, scene_per_step: usize, horizon: usize) -> Result<Self> {
        let d = policy.config.d_llm;
        let scene_rows = timesteps * scene_per_step;
        if tape.shape(input.scene) != [scene_rows, d] {
            return Err(shape_err("sample", format!("scene {:?}, expected [{scene_rows}, {d}]", tape.shape(input.scene))));
        }
        let mut scene = input.scene;
        if let Some(cams) = &input.scene_cameras {
            let ids = cams
                .iter()
                .map(|&c| policy.config.vocab.camera_token(c as usize))
                .collect::<Result<Vec<_>>>()?;
            let ce = policy.embed_tokens(tape, &ids)?;
            scene = tape.add(scene, ce)?;
        }
        let start = policy.embed_tokens(tape, &[policy.config.vocab.start_token()])?;
        let hist_rows = tape.shape(input.history)[0];
        let hist = tape.slice_rows(input.history, hist_rows - 1, 1)?;
        let prefix = tape.concat_rows(&[start, scene, hist])?;
        let prefix_rows = scene_rows + 2;
        Ok(Self {
            prefix,
            prefix_positions: (0..prefix_rows).collect(),
            prefix_rows,
            future_position: prefix_rows,
            horizon,
        })
    }
}

/// Samples an index from `softmax(logits / temperature)`, or the argmax
/// (first on ties) when the temperature is not positive.
pub fn pick(logits: &[f32], temperature: f32, rng: &mut Rng) -> usize {
    let argmax = logits
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    if temperature <= 0.0 {
        return argmax;
    }
    let m = logits[argmax];
    let w: Vec<f64> = logits.iter().map(|&v| (((v - m) / temperature) as f64).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        u -= wi;
        if u < 0.0 {
            return i;
        }
    }
    argmax
}
