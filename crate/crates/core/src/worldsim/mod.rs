//! Deterministic synthetic driving world.
//!
//! A clip is a pure function of `(seed, WorldConfig)`: the seed picks a
//! scripted scenario (lane-follow, lane-change, turn, stop), its parameters,
//! traffic and the background texture; the ego trajectory is analytic in time,
//! so history, per-step futures and rendered frames are all exact samples of
//! the same motion. Cameras overlap by construction (the telephoto view is a
//! 2x center zoom of the wide view) and consecutive frames differ only by the
//! ego displacement.

mod road;
mod render;

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use render::{
    render_camera, shade, Agent, CameraSpec, Pose, WorldState, AGENT_COLOR, MARKER_COLOR, MARKER_RADIUS,
    MARKING_THRESHOLD, MAX_CAMERAS, VIEW_DEPTH, VIEW_HALF_WIDTH,
};
pub use road::Road;

use crate::error::{Error, Result};
use crate::rng;

const LANE_WIDTH: f64 = 3.5;
/// Simulation time of the last observed frame.
const T_END: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub cameras: usize,
    pub timesteps: usize,
    /// Number of future waypoints.
    pub horizon: usize,
    /// Ego states per history.
    pub history_len: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Spacing of the underlying frame clock, seconds.
    pub base_dt: f64,
    /// Observed frames are every `frame_stride`-th tick of the base clock.
    pub frame_stride: usize,
    pub waypoint_dt: f64,
    pub history_dt: f64,
    /// Forces a scenario instead of drawing one from the seed.
    pub scenario: Option<Scenario>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            cameras: 2,
            timesteps: 9,
            horizon: 10,
            history_len: 4,
            image_height: 32,
            image_width: 64,
            base_dt: 0.125,
            frame_stride: 1,
            waypoint_dt: 0.5,
            history_dt: 0.5,
            scenario: None,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world: {m}")));
        if self.cameras == 0 || self.cameras > MAX_CAMERAS {
            return bad(&format!("cameras must be in 1..={MAX_CAMERAS}, got {}", self.cameras));
        }
        if self.timesteps < 2 {
            return bad("timesteps must be at least 2");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.history_len < 2 {
            return bad("history_len must be at least 2");
        }
        if self.image_height == 0 || self.image_width == 0 {
            return bad("image extents must be positive");
        }
        if self.frame_stride == 0 || !(self.base_dt > 0.0) || !(self.waypoint_dt > 0.0) || !(self.history_dt > 0.0) {
            return bad("time steps and stride must be positive");
        }
        Ok(())
    }

    pub fn frame_dt(&self) -> f64 {
        self.base_dt * self.frame_stride as f64
    }

    pub fn image_len(&self) -> usize {
        self.image_height * self.image_width * 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    LaneFollow,
    LaneChange,
    Turn,
    Stop,
    /// Empty ground with a single destination marker; used by attention probes.
    MarkerProbe,
}

impl Scenario {
    pub fn code(self) -> u8 {
        match self {
            Scenario::LaneFollow => 0,
            Scenario::LaneChange => 1,
            Scenario::Turn => 2,
            Scenario::Stop => 3,
            Scenario::MarkerProbe => 4,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Scenario::LaneFollow,
            1 => Scenario::LaneChange,
            2 => Scenario::Turn,
            3 => Scenario::Stop,
            4 => Scenario::MarkerProbe,
            _ => return None,
        })
    }

    /// 40% lane-follow, 25% lane-change, 25% turn, 10% stop.
    fn draw(r: &mut rng::Rng) -> Self {
        match r.gen_range(0u32..100) {
            0..=39 => Scenario::LaneFollow,
            40..=64 => Scenario::LaneChange,
            65..=89 => Scenario::Turn,
            _ => Scenario::Stop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum Profile {
    Cruise,
    LaneChange { start: f64, duration: f64, delta: f64 },
    Brake { start: f64, decel: f64 },
}

/// Scripted ego motion along the road.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Motion {
    speed: f64,
    lane: f64,
    profile: Profile,
}

impl Motion {
    fn s(&self, t: f64) -> f64 {
        match self.profile {
            Profile::Brake { start, decel } if t > start => {
                let tau = (t - start).min(self.speed / decel);
                self.speed * start + self.speed * tau - 0.5 * decel * tau * tau
            }
            _ => self.speed * t,
        }
    }

    fn s_dot(&self, t: f64) -> f64 {
        match self.profile {
            Profile::Brake { start, decel } if t > start => (self.speed - decel * (t - start)).max(0.0),
            _ => self.speed,
        }
    }

    fn d(&self, t: f64) -> f64 {
        match self.profile {
            Profile::LaneChange { start, duration, delta } => {
                let u = ((t - start) / duration).clamp(0.0, 1.0);
                self.lane + delta * u * u * (3.0 - 2.0 * u)
            }
            _ => self.lane,
        }
    }

    fn d_dot(&self, t: f64) -> f64 {
        match self.profile {
            Profile::LaneChange { start, duration, delta } => {
                let u = (t - start) / duration;
                if (0.0..=1.0).contains(&u) {
                    delta * 6.0 * u * (1.0 - u) / duration
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    }
}

/// Traffic participant moving along the road at constant speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Traffic {
    s0: f64,
    d: f64,
    speed: f64,
}

/// A fully specified scenario: evaluating it at any time yields a [`WorldState`].
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub scenario: Scenario,
    pub seed: u64,
    road: Road,
    draw_road: bool,
    motion: Motion,
    traffic: Vec<Traffic>,
    marker: (f64, f64),
}

impl Episode {
    pub fn new(seed: u64, config: &WorldConfig) -> Self {
        let mut r = rng::stream(seed, "episode");
        let scenario = config.scenario.unwrap_or_else(|| Scenario::draw(&mut r));
        let lane = if r.gen_bool(0.5) { -LANE_WIDTH / 2.0 } else { LANE_WIDTH / 2.0 };
        let mut speed = r.gen_range(4.0..9.0);
        let mut road = Road::straight(LANE_WIDTH);
        let mut profile = Profile::Cruise;
        let mut traffic = Vec::new();
        match scenario {
            Scenario::LaneFollow | Scenario::MarkerProbe => {}
            Scenario::LaneChange => {
                profile = Profile::LaneChange {
                    start: T_END + r.gen_range(-1.5..2.0),
                    duration: 3.0,
                    delta: -2.0 * lane,
                };
            }
            Scenario::Turn => {
                let t_turn = T_END + r.gen_range(-1.0..2.5);
                let radius = r.gen_range(45.0..90.0);
                let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
                road = Road {
                    turn_start: speed * t_turn,
                    curvature: sign / radius,
                    turn_angle: core::f64::consts::FRAC_PI_2,
                    lane_width: LANE_WIDTH,
                    lanes: 2,
                };
            }
            Scenario::Stop => {
                let start = T_END + r.gen_range(-1.5..1.0);
                let decel = r.gen_range(1.5..3.5);
                profile = Profile::Brake { start, decel };
                let stop_s = speed * start + speed * speed / (2.0 * decel);
                traffic.push(Traffic { s0: stop_s + 7.0, d: lane, speed: 0.0 });
            }
        }
        if scenario == Scenario::MarkerProbe {
            speed = r.gen_range(2.0..4.0);
        } else {
            for _ in 0..r.gen_range(0..=2usize) {
                let v = r.gen_range(3.0..12.0);
                let s_at_end = speed * T_END + r.gen_range(-10.0..50.0);
                traffic.push(Traffic { s0: s_at_end - v * T_END, d: -lane, speed: v });
            }
        }
        let motion = Motion { speed, lane, profile };
        let mut ep = Self {
            scenario,
            seed,
            road,
            draw_road: scenario != Scenario::MarkerProbe,
            motion,
            traffic,
            marker: (0.0, 0.0),
        };
        ep.marker = if scenario == Scenario::MarkerProbe {
            let ahead = r.gen_range(12.0..30.0);
            let side = r.gen_range(-9.0..9.0);
            ep.ego_pose(T_END).to_world(ahead, side)
        } else {
            let dest = ep.ego_pose(T_END + config.horizon as f64 * config.waypoint_dt);
            (dest.x, dest.y)
        };
        ep
    }

    pub fn ego_pose(&self, t: f64) -> Pose {
        let (s, d) = (self.motion.s(t), self.motion.d(t));
        let (x, y) = self.road.point(s, d);
        let base = self.road.center(s).heading;
        let heading = base + self.motion.d_dot(t).atan2(self.motion.s_dot(t));
        Pose { x, y, heading }
    }

    pub fn state_at(&self, t: f64) -> WorldState {
        let agents = self
            .traffic
            .iter()
            .map(|a| {
                let s = a.s0 + a.speed * t;
                let (x, y) = self.road.point(s, a.d);
                Agent {
                    pose: Pose { x, y, heading: self.road.center(s).heading },
                    speed: a.speed,
                    extent: (4.5, 2.0),
                }
            })
            .collect();
        WorldState {
            ego_pose: self.ego_pose(t),
            ego_speed: self.motion.s_dot(t).hypot(self.motion.d_dot(t)),
            road: self.draw_road.then_some(self.road),
            agents,
            marker: Some(self.marker),
            seed: rng::derive(self.seed, "texture"),
        }
    }

    pub fn marker(&self) -> (f64, f64) {
        self.marker
    }
}

/// Ego state relative to a reference pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f32,
    pub y: f32,
    pub heading: f32,
    /// Finite-difference speed over the history spacing, m/s.
    pub speed: f32,
}

impl EgoState {
    pub const FEATURES: usize = 4;

    pub fn features(&self) -> [f32; 4] {
        [self.x, self.y, self.heading, self.speed]
    }
}

/// One sample: `C × T` images plus per-timestep ego history and future.
///
/// Images are stored timestep-major: image `(c, t)` starts at
/// `(t * C + c) * H * W * 3`. For every observed timestep `k` the clip holds the
/// history ending at `t_k` and the future after `t_k`, both in the ego frame at
/// `t_k`; [`history`](Self::history) and [`future`](Self::future) are the
/// entries of the final timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: u64,
    pub seed: u64,
    pub scenario: Scenario,
    pub cameras: usize,
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    pub horizon: usize,
    pub history_len: usize,
    pub camera_ids: Vec<u32>,
    pub timestamps: Vec<f32>,
    pub images: Vec<f32>,
    pub step_history: Vec<EgoState>,
    pub step_future: Vec<[f32; 2]>,
    /// World pose of the ego at each observed timestep.
    pub frame_poses: Vec<Pose>,
    pub marker: Option<(f64, f64)>,
}

impl Clip {
    pub fn image_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn image(&self, camera: usize, t: usize) -> &[f32] {
        let n = self.image_len();
        let i = t * self.cameras + camera;
        &self.images[i * n..(i + 1) * n]
    }

    pub fn history_at(&self, k: usize) -> &[EgoState] {
        &self.step_history[k * self.history_len..(k + 1) * self.history_len]
    }

    pub fn future_at(&self, k: usize) -> &[[f32; 2]] {
        &self.step_future[k * self.horizon..(k + 1) * self.horizon]
    }

    pub fn history(&self) -> &[EgoState] {
        self.history_at(self.timesteps - 1)
    }

    pub fn future(&self) -> &[[f32; 2]] {
        self.future_at(self.timesteps - 1)
    }

    /// Keeps only the first `cameras` rig slots.
    pub fn with_cameras(&self, cameras: usize) -> Result<Clip> {
        if cameras == 0 || cameras > self.cameras {
            return Err(Error::Config(format!("clip has {} cameras, asked for {}", self.cameras, cameras)));
        }
        let mut out = self.clone();
        out.cameras = cameras;
        out.camera_ids.truncate(cameras);
        out.images = (0..self.timesteps)
            .flat_map(|t| (0..cameras).flat_map(move |c| self.image(c, t).iter().copied()))
            .collect();
        Ok(out)
    }

    /// Continuous image coordinates (row, col) of the marker in image `(c, t)`,
    /// if it falls inside the frame.
    pub fn marker_pixel(&self, camera: usize, t: usize) -> Option<(f64, f64)> {
        let (mx, my) = self.marker?;
        let spec = CameraSpec::slot(self.camera_ids[camera] as usize)?;
        let (ex, ey) = self.frame_poses[t].to_local(mx, my);
        let (u, v) = spec.image_coords(ex, ey);
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return None;
        }
        Some((v * self.height as f64, u * self.width as f64))
    }
}

fn wrap_angle(a: f64) -> f64 {
    use core::f64::consts::PI;
    let r = a + PI;
    r - 2.0 * PI * (r / (2.0 * PI)).floor() - PI
}

/// Generates the clip for `seed`; the clip id is the seed.
pub fn generate_clip(seed: u64, config: &WorldConfig) -> Result<Clip> {
    generate_clip_with_id(seed, seed, config)
}

pub fn generate_clip_with_id(id: u64, seed: u64, config: &WorldConfig) -> Result<Clip> {
    config.validate()?;
    let ep = Episode::new(seed, config);
    let (c_n, t_n) = (config.cameras, config.timesteps);
    let frame_dt = config.frame_dt();
    let times: Vec<f64> = (0..t_n).map(|k| T_END - (t_n - 1 - k) as f64 * frame_dt).collect();
    let cams: Vec<CameraSpec> = (0..c_n).map(|c| CameraSpec::slot(c).expect("validated")).collect();

    let mut images = Vec::with_capacity(t_n * c_n * config.image_len());
    let mut frame_poses = Vec::with_capacity(t_n);
    let mut step_history = Vec::with_capacity(t_n * config.history_len);
    let mut step_future = Vec::with_capacity(t_n * config.horizon);
    for (k, &t) in times.iter().enumerate() {
        let state = ep.state_at(t);
        for (c, cam) in cams.iter().enumerate() {
            images.extend(render_camera(&state, cam, config.image_height, config.image_width, (k * 16 + c) as u64));
        }
        let frame = ep.ego_pose(t);
        frame_poses.push(frame);
        for j in 0..config.history_len {
            let tau = t - (config.history_len - 1 - j) as f64 * config.history_dt;
            let p = ep.ego_pose(tau);
            let prev = ep.ego_pose(tau - config.history_dt);
            let (x, y) = frame.to_local(p.x, p.y);
            let speed = (p.x - prev.x).hypot(p.y - prev.y) / config.history_dt;
            step_history.push(EgoState {
                x: x as f32,
                y: y as f32,
                heading: wrap_angle(p.heading - frame.heading) as f32,
                speed: speed as f32,
            });
        }
        for j in 1..=config.horizon {
            let p = ep.ego_pose(t + j as f64 * config.waypoint_dt);
            let (x, y) = frame.to_local(p.x, p.y);
            step_future.push([x as f32, y as f32]);
        }
    }
    Ok(Clip {
        id,
        seed,
        scenario: ep.scenario,
        cameras: c_n,
        timesteps: t_n,
        height: config.image_height,
        width: config.image_width,
        horizon: config.horizon,
        history_len: config.history_len,
        camera_ids: cams.iter().map(|c| c.id).collect(),
        timestamps: times.iter().map(|&t| t as f32).collect(),
        images,
        step_history,
        step_future,
        frame_poses,
        marker: Some(ep.marker()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

const SPLIT_SALT: u64 = 0x5eed_0000_5917;

/// 90/10 train/test assignment by a hash of the clip id.
pub fn split_of(clip_id: u64) -> Split {
    if rng::mix(clip_id ^ SPLIT_SALT) % 10 == 0 {
        Split::Test
    } else {
        Split::Train
    }
}
