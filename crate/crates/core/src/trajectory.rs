//! Waypoint vocabulary and the ego-history token.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffArray, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::worldsim::{EgoState, MAX_CAMERAS};

/// Per-axis bins over the ego frame. Token ids `0..x_bins*y_bins` are
/// waypoints (`x_bin * y_bins + y_bin`); special tokens follow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaypointVocab {
    pub x_bins: u32,
    pub y_bins: u32,
    pub x_range: (f32, f32),
    pub y_range: (f32, f32),
}

impl Default for WaypointVocab {
    fn default() -> Self {
        Self { x_bins: 32, y_bins: 32, x_range: (-5.0, 40.0), y_range: (-10.0, 10.0) }
    }
}

impl WaypointVocab {
    pub fn new(x_bins: u32, y_bins: u32, x_range: (f32, f32), y_range: (f32, f32)) -> Result<Self> {
        let v = Self { x_bins, y_bins, x_range, y_range };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_bins == 0 || self.y_bins == 0 {
            return Err(Error::Config("vocab: bin counts must be positive".into()));
        }
        if !(self.x_range.1 > self.x_range.0) || !(self.y_range.1 > self.y_range.0) {
            return Err(Error::Config(format!(
                "vocab: empty range x {:?} y {:?}",
                self.x_range, self.y_range
            )));
        }
        Ok(())
    }

    pub fn waypoint_count(&self) -> u32 {
        self.x_bins * self.y_bins
    }

    pub fn start_token(&self) -> u32 {
        self.waypoint_count()
    }

    pub fn end_token(&self) -> u32 {
        self.waypoint_count() + 1
    }

    /// Camera-type token for rig slot `camera`.
    pub fn camera_token(&self, camera: usize) -> Result<u32> {
        if camera >= MAX_CAMERAS {
            return Err(Error::UnknownCamera(camera));
        }
        Ok(self.waypoint_count() + 2 + camera as u32)
    }

    pub fn vocab_size(&self) -> usize {
        (self.waypoint_count() + 2) as usize + MAX_CAMERAS
    }

    pub fn bin_width(&self) -> (f32, f32) {
        (
            (self.x_range.1 - self.x_range.0) / self.x_bins as f32,
            (self.y_range.1 - self.y_range.0) / self.y_bins as f32,
        )
    }

    fn bin(v: f32, (lo, hi): (f32, f32), n: u32) -> u32 {
        let u = (v as f64 - lo as f64) / (hi as f64 - lo as f64) * n as f64;
        if !(u > 0.0) {
            0
        } else {
            (u.floor() as u64).min(n as u64 - 1) as u32
        }
    }

    fn center(i: u32, (lo, hi): (f32, f32), n: u32) -> f32 {
        (lo as f64 + (i as f64 + 0.5) * (hi as f64 - lo as f64) / n as f64) as f32
    }

    /// Token of one point; out-of-range coordinates clamp to the edge bins.
    pub fn token(&self, p: [f32; 2]) -> u32 {
        Self::bin(p[0], self.x_range, self.x_bins) * self.y_bins + Self::bin(p[1], self.y_range, self.y_bins)
    }

    pub fn discretize(&self, waypoints: &[[f32; 2]]) -> Vec<u32> {
        waypoints.iter().map(|p| self.token(*p)).collect()
    }

    /// Bin center of a waypoint token.
    pub fn waypoint(&self, id: u32) -> Result<[f32; 2]> {
        if id >= self.waypoint_count() {
            return Err(Error::OutOfVocab { id, vocab: self.waypoint_count() as usize });
        }
        Ok([
            Self::center(id / self.y_bins, self.x_range, self.x_bins),
            Self::center(id % self.y_bins, self.y_range, self.y_bins),
        ])
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<Vec<[f32; 2]>> {
        ids.iter().map(|&id| self.waypoint(id)).collect()
    }
}

const POS_SCALE: f32 = 0.1;
const SPEED_SCALE: f32 = 0.1;

/// Flattened, scaled features of a fixed-length history.
pub fn history_features(states: &[EgoState]) -> Vec<f32> {
    states
        .iter()
        .flat_map(|s| [s.x * POS_SCALE, s.y * POS_SCALE, s.heading, s.speed * SPEED_SCALE])
        .collect()
}

/// Two-layer MLP compressing a whole ego history into one token.
#[derive(Debug, Clone, Copy)]
pub struct HistoryEncoder {
    pub mlp: Mlp,
    pub history_len: usize,
    pub dim: usize,
}

impl HistoryEncoder {
    pub fn new(store: &mut ParamStore, name: &str, history_len: usize, hidden: usize, dim: usize) -> Result<Self> {
        let input = history_len * EgoState::FEATURES;
        Ok(Self { mlp: Mlp::new(store, name, input, hidden, dim)?, history_len, dim })
    }

    /// One `[1, dim]` token for `states`.
    pub fn encode(&self, tape: &mut Tape, states: &[EgoState]) -> Result<Var> {
        self.encode_many(tape, &[states])
    }

    /// One token per history, stacked as `[n, dim]`.
    pub fn encode_many(&self, tape: &mut Tape, histories: &[&[EgoState]]) -> Result<Var> {
        let mut feats = Vec::with_capacity(histories.len() * self.history_len * EgoState::FEATURES);
        for h in histories {
            if h.len() != self.history_len {
                return Err(Error::Shape {
                    op: "encode_history",
                    detail: format!("expected {} states, got {}", self.history_len, h.len()),
                });
            }
            feats.extend(history_features(h));
        }
        let x = DiffArray::new(&[histories.len(), self.history_len * EgoState::FEATURES], feats)?;
        let x = tape.constant(x);
        self.mlp.forward(tape, x)
    }
}
