//! Synthetic dataset generation and the `FLEXDATA` file format.
//!
//! Layout: magic `FLEXDATA`, `u32` version, `u64` header length, JSON
//! [`DatasetHeader`], `u64` record count, then per clip a `u64` payload length
//! followed by the payload. Payload fields are little-endian, in [`Clip`] field
//! order; images are raw `f32`.

use std::path::Path;

use flex_core::rng;
use flex_core::worldsim::{generate_clip_with_id, split_of, Clip, EgoState, Pose, Scenario, Split, WorldConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{read_file, read_preamble, write_file, write_preamble, Decoder, Encoder};
use crate::error::{FlexError, Result};

pub const MAGIC: &[u8; 8] = b"FLEXDATA";
pub const VERSION: u32 = 1;

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub world: WorldConfig,
    pub seed: u64,
    pub clips: u64,
    /// Frame stride of training-split clips.
    pub train_stride: usize,
    /// Frame stride of test-split clips.
    pub eval_stride: usize,
}

impl DatasetHeader {
    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 {
            return Err(FlexError::Config("dataset needs at least one clip".into()));
        }
        if self.train_stride == 0 || self.eval_stride == 0 {
            return Err(FlexError::Config("frame strides must be positive".into()));
        }
        self.world.validate()?;
        Ok(())
    }

    pub fn clip_seed(&self, id: u64) -> u64 {
        rng::derive_n(self.seed, "clip", id)
    }

    pub fn world_for(&self, id: u64) -> WorldConfig {
        let frame_stride = match split_of(id) {
            Split::Train => self.train_stride,
            Split::Test => self.eval_stride,
        };
        WorldConfig { frame_stride, ..self.world }
    }

    pub fn clip(&self, id: u64) -> Result<Clip> {
        Ok(generate_clip_with_id(id, self.clip_seed(id), &self.world_for(id))?)
    }

    pub fn generate(&self) -> Result<Vec<Clip>> {
        self.validate()?;
        (0..self.clips).map(|id| self.clip(id)).collect()
    }
}

/// A dataset in memory with the hash of its serialized header.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub header_sha256: String,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn generate(header: DatasetHeader) -> Result<Self> {
        let clips = header.generate()?;
        let header_sha256 = sha256_hex(&serde_json::to_vec(&header)?);
        Ok(Self { header, header_sha256, clips })
    }

    pub fn split(&self, split: Split) -> Vec<&Clip> {
        self.clips.iter().filter(|c| split_of(c.id) == split).collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_clip(e: &mut Encoder, c: &Clip) {
    e.u64(c.id);
    e.u64(c.seed);
    e.u8(c.scenario.code());
    for v in [c.cameras, c.timesteps, c.height, c.width, c.horizon, c.history_len] {
        e.u32(v as u32);
    }
    e.u32s(&c.camera_ids);
    e.f32s(&c.timestamps);
    e.f32s(&c.images);
    for s in &c.step_history {
        e.f32s(&s.features());
    }
    for p in &c.step_future {
        e.f32s(p);
    }
    for p in &c.frame_poses {
        e.f64(p.x);
        e.f64(p.y);
        e.f64(p.heading);
    }
    match c.marker {
        Some((x, y)) => {
            e.u8(1);
            e.f64(x);
            e.f64(y);
        }
        None => e.u8(0),
    }
}

fn decode_clip(d: &mut Decoder) -> Option<std::result::Result<Clip, String>> {
    let id = d.u64()?;
    let seed = d.u64()?;
    let Some(scenario) = Scenario::from_code(d.u8()?) else {
        return Some(Err("unknown scenario code".into()));
    };
    let mut dims = [0usize; 6];
    for v in &mut dims {
        *v = d.u32()? as usize;
    }
    let [cameras, timesteps, height, width, horizon, history_len] = dims;
    let camera_ids = d.u32s(cameras)?;
    let timestamps = d.f32s(timesteps)?;
    let images = d.f32s(timesteps.checked_mul(cameras)?.checked_mul(height * width * 3)?)?;
    let step_history = d
        .f32s(timesteps * history_len * EgoState::FEATURES)?
        .chunks_exact(EgoState::FEATURES)
        .map(|f| EgoState { x: f[0], y: f[1], heading: f[2], speed: f[3] })
        .collect();
    let step_future = d.f32s(timesteps * horizon * 2)?.chunks_exact(2).map(|p| [p[0], p[1]]).collect();
    let mut frame_poses = Vec::with_capacity(timesteps);
    for _ in 0..timesteps {
        frame_poses.push(Pose { x: d.f64()?, y: d.f64()?, heading: d.f64()? });
    }
    let marker = match d.u8()? {
        0 => None,
        1 => Some((d.f64()?, d.f64()?)),
        f => return Some(Err(format!("bad marker flag {f}"))),
    };
    Some(Ok(Clip {
        id,
        seed,
        scenario,
        cameras,
        timesteps,
        height,
        width,
        horizon,
        history_len,
        camera_ids,
        timestamps,
        images,
        step_history,
        step_future,
        frame_poses,
        marker,
    }))
}

pub fn encode_dataset(header: &DatasetHeader, clips: &[Clip]) -> Result<Vec<u8>> {
    let mut e = Encoder::default();
    write_preamble(&mut e, MAGIC, VERSION, header)?;
    e.u64(clips.len() as u64);
    let mut rec = Encoder::default();
    for c in clips {
        rec.buf.clear();
        encode_clip(&mut rec, c);
        e.u64(rec.buf.len() as u64);
        e.buf.extend_from_slice(&rec.buf);
    }
    Ok(e.buf)
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, clips: &[Clip]) -> Result<()> {
    write_file(path, &encode_dataset(header, clips)?)
}

pub fn decode_dataset(path: &Path, bytes: &[u8]) -> Result<Dataset> {
    let (header, raw, mut d): (DatasetHeader, _, _) = read_preamble(path, bytes, MAGIC, VERSION)?;
    let header_sha256 = sha256_hex(raw);
    let count = d.u64().ok_or(FlexError::Truncated { path: path.to_path_buf(), record: 0 })?;
    let mut clips = Vec::with_capacity(count.min(1 << 16) as usize);
    for i in 0..count {
        let truncated = || FlexError::Truncated { path: path.to_path_buf(), record: i };
        let len = d.u64().ok_or_else(truncated)? as usize;
        let payload = d.bytes(len).ok_or_else(truncated)?;
        let mut rd = Decoder::new(payload);
        let clip = match decode_clip(&mut rd) {
            None => return Err(truncated()),
            Some(Err(msg)) => return Err(FlexError::format(path, format!("record {i}: {msg}"))),
            Some(Ok(c)) => c,
        };
        if rd.remaining() != 0 {
            return Err(FlexError::format(path, format!("record {i}: {} trailing bytes", rd.remaining())));
        }
        clips.push(clip);
    }
    if d.remaining() != 0 {
        return Err(FlexError::format(path, format!("{} bytes after the last record", d.remaining())));
    }
    Ok(Dataset { header, header_sha256, clips })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(path, &read_file(path)?)
}
