use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::road::Road;
use crate::rng;

/// Forward extent of the full-FOV raster, metres.
pub const VIEW_DEPTH: f64 = 48.0;
/// Half of the lateral extent of the full-FOV raster, metres.
pub const VIEW_HALF_WIDTH: f64 = 24.0;

pub const MARKING_THRESHOLD: f32 = 0.8;
pub const AGENT_COLOR: [f32; 3] = [0.85, 0.12, 0.12];
pub const MARKER_COLOR: [f32; 3] = [1.0, 0.85, 0.05];
pub const MARKING_COLOR: [f32; 3] = [0.95, 0.95, 0.9];
pub const MARKER_RADIUS: f64 = 1.6;
const MARKING_WIDTH: f64 = 0.45;
const DASH_PERIOD: f64 = 6.0;
const JITTER: f32 = 0.01;
const SUPERSAMPLE: usize = 2;

/// Rig slot. Slot 0 is the front-wide camera, slot 1 the front telephoto
/// (2x center zoom of slot 0), slots 2.. are full-FOV side and rear views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub id: u32,
    /// Yaw of the view axis relative to the ego heading, radians (left positive).
    pub yaw: f64,
    pub zoom: f64,
}

pub const MAX_CAMERAS: usize = 7;

impl CameraSpec {
    pub fn slot(id: usize) -> Option<Self> {
        use core::f64::consts::PI;
        let (yaw, zoom) = match id {
            0 => (0.0, 1.0),
            1 => (0.0, 2.0),
            2 => (PI / 3.0, 1.0),
            3 => (-PI / 3.0, 1.0),
            4 => (2.0 * PI / 3.0, 1.0),
            5 => (-2.0 * PI / 3.0, 1.0),
            6 => (PI, 1.0),
            _ => return None,
        };
        Some(Self { id: id as u32, yaw, zoom })
    }

    pub fn name(&self) -> &'static str {
        match self.id {
            0 => "front_wide",
            1 => "front_tele",
            2 => "left",
            3 => "right",
            4 => "rear_left",
            5 => "rear_right",
            6 => "rear",
            _ => "unknown",
        }
    }

    /// Ego-frame point seen at normalized image coordinates `(u, v)` in `[0, 1]`
    /// (`u` left to right, `v` top to bottom).
    pub fn ego_point(&self, u: f64, v: f64) -> (f64, f64) {
        let f = VIEW_DEPTH / 2.0 + (0.5 - v) * VIEW_DEPTH / self.zoom;
        let l = (0.5 - u) * 2.0 * VIEW_HALF_WIDTH / self.zoom;
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        (f * c - l * s, f * s + l * c)
    }

    /// Inverse of [`ego_point`](Self::ego_point).
    pub fn image_coords(&self, ex: f64, ey: f64) -> (f64, f64) {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let f = ex * c + ey * s;
        let l = -ex * s + ey * c;
        let v = 0.5 - (f - VIEW_DEPTH / 2.0) * self.zoom / VIEW_DEPTH;
        let u = 0.5 - l * self.zoom / (2.0 * VIEW_HALF_WIDTH);
        (u, v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    /// Expresses a world point in this pose's frame.
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.x, y - self.y);
        let (c, s) = (self.heading.cos(), self.heading.sin());
        (dx * c + dy * s, -dx * s + dy * c)
    }

    pub fn to_world(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        (self.x + lx * c - ly * s, self.y + lx * s + ly * c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub pose: Pose,
    pub speed: f64,
    /// (length, width) in metres.
    pub extent: (f64, f64),
}

/// Everything needed to draw one instant of the world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub ego_pose: Pose,
    pub ego_speed: f64,
    pub road: Option<Road>,
    pub agents: Vec<Agent>,
    pub marker: Option<(f64, f64)>,
    /// Seeds the background texture, which is fixed in world coordinates.
    pub seed: u64,
}

impl WorldState {
    pub fn empty(seed: u64) -> Self {
        Self {
            ego_pose: Pose { x: 0.0, y: 0.0, heading: 0.0 },
            ego_speed: 0.0,
            road: None,
            agents: Vec::new(),
            marker: None,
            seed,
        }
    }
}

/// Smooth value noise in `[0, 1]` on a 3 m lattice, fixed in world space.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    const CELL: f64 = 3.0;
    let (gx, gy) = (x / CELL, y / CELL);
    let (ix, iy) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - ix, gy - iy);
    let lattice = |i: f64, j: f64| -> f64 {
        let h = rng::mix(seed ^ rng::mix((i as i64 as u64).wrapping_mul(0x9e37_79b9) ^ (j as i64 as u64).rotate_left(32)));
        (h >> 11) as f64 / (1u64 << 53) as f64
    };
    let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
    let a = lattice(ix, iy) * (1.0 - sx) + lattice(ix + 1.0, iy) * sx;
    let b = lattice(ix, iy + 1.0) * (1.0 - sx) + lattice(ix + 1.0, iy + 1.0) * sx;
    a * (1.0 - sy) + b * sy
}

/// Color of the world at a world-space point.
pub fn shade(world: &WorldState, x: f64, y: f64) -> [f32; 3] {
    let n = value_noise(world.seed, x, y) as f32;
    let mut color = [0.16 + 0.12 * n, 0.34 + 0.12 * n, 0.15 + 0.08 * n];
    if let Some(road) = &world.road {
        let (s, d) = road.project(x, y);
        let half = road.half_width();
        if d.abs() <= half {
            color = [0.33 + 0.04 * n, 0.33 + 0.04 * n, 0.36 + 0.04 * n];
            let edge = d.abs() >= half - MARKING_WIDTH;
            let mut divider = false;
            for lane in 1..road.lanes {
                let off = -half + lane as f64 * road.lane_width;
                if (d - off).abs() <= MARKING_WIDTH / 2.0 && (s / DASH_PERIOD).fract().abs() < 0.5 {
                    divider = true;
                }
            }
            if edge || divider {
                color = MARKING_COLOR;
            }
        }
    }
    for a in &world.agents {
        let (lx, ly) = a.pose.to_local(x, y);
        if lx.abs() <= a.extent.0 / 2.0 && ly.abs() <= a.extent.1 / 2.0 {
            color = AGENT_COLOR;
        }
    }
    if let Some((mx, my)) = world.marker {
        if (x - mx).hypot(y - my) <= MARKER_RADIUS {
            color = MARKER_COLOR;
        }
    }
    color
}

/// Renders one `height × width × 3` image with values in `[0, 1]`.
pub fn render_camera(world: &WorldState, camera: &CameraSpec, height: usize, width: usize, jitter_seed: u64) -> Vec<f32> {
    let mut img = vec![0.0f32; height * width * 3];
    let mut jitter = rng::stream_n(world.seed, "jitter", jitter_seed);
    let ss = SUPERSAMPLE as f64;
    let weight = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for r in 0..height {
        for c in 0..width {
            let mut acc = [0.0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = (c as f64 + (sx as f64 + 0.5) / ss) / width as f64;
                    let v = (r as f64 + (sy as f64 + 0.5) / ss) / height as f64;
                    let (ex, ey) = camera.ego_point(u, v);
                    let (wx, wy) = world.ego_pose.to_world(ex, ey);
                    let col = shade(world, wx, wy);
                    for ch in 0..3 {
                        acc[ch] += col[ch] * weight;
                    }
                }
            }
            let px = &mut img[(r * width + c) * 3..(r * width + c) * 3 + 3];
            for ch in 0..3 {
                let noise = jitter.gen_range(-JITTER..=JITTER);
                px[ch] = (acc[ch] + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}
