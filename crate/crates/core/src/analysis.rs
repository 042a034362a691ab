//! Scene-token attention probes: maximal response per token, the sorted
//! response curve, and per-image response maps.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scene::AttentionRecord;
use crate::worldsim::Clip;

/// Image-token position: camera slot, timestep and patch cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyLocation {
    pub camera: u32,
    pub timestep: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenResponse {
    pub token_index: usize,
    pub max_response: f64,
    pub argmax_key: KeyLocation,
    /// Position after sorting by descending response (0 is strongest).
    pub rank: usize,
}

fn check(record: &AttentionRecord) -> Result<usize> {
    let m = record.keys();
    if record.heads == 0 || record.weights.len() != record.heads * record.k * m {
        return Err(shape_err(
            "token_responses",
            format!("{} weights for {} heads x {} tokens x {m} keys", record.weights.len(), record.heads, record.k),
        ));
    }
    Ok(m)
}

/// Head-averaged attention of one scene token over all image keys.
pub fn head_mean(record: &AttentionRecord, token: usize) -> Vec<f64> {
    let m = record.keys();
    let mut out = alloc::vec![0.0f64; m];
    for h in 0..record.heads {
        let row = &record.weights[(h * record.k + token) * m..][..m];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += w as f64;
        }
    }
    for o in &mut out {
        *o /= record.heads as f64;
    }
    out
}

/// Decodes a flat image-key index.
pub fn locate(record: &AttentionRecord, mut key: usize) -> Result<KeyLocation> {
    for s in &record.slots {
        let n = s.rows * s.cols;
        if key < n {
            return Ok(KeyLocation { camera: s.camera_id, timestep: s.timestep_index, row: key / s.cols, col: key % s.cols });
        }
        key -= n;
    }
    Err(Error::Invalid(format!("key index beyond {} image tokens", record.keys())))
}

pub fn token_responses(record: &AttentionRecord) -> Result<Vec<TokenResponse>> {
    check(record)?;
    let mut out = Vec::with_capacity(record.k);
    for t in 0..record.k {
        let mean = head_mean(record, t);
        let (arg, max) = mean
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        out.push(TokenResponse { token_index: t, max_response: max, argmax_key: locate(record, arg)?, rank: 0 });
    }
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| out[b].max_response.total_cmp(&out[a].max_response).then(a.cmp(&b)));
    for (rank, &i) in order.iter().enumerate() {
        out[i].rank = rank;
    }
    Ok(out)
}

/// Per-token mean of `max_response` over clips, sorted descending.
pub fn sorted_response_curve(per_clip: &[Vec<TokenResponse>]) -> Result<Vec<f64>> {
    let k = per_clip.first().map(Vec::len).ok_or_else(|| Error::Invalid("no clips to aggregate".into()))?;
    if per_clip.iter().any(|r| r.len() != k) {
        return Err(Error::Invalid("clips disagree on the scene-token count".into()));
    }
    let mut curve: Vec<f64> = (0..k)
        .map(|t| per_clip.iter().map(|r| r[t].max_response).sum::<f64>() / per_clip.len() as f64)
        .collect();
    curve.sort_by(|a, b| b.total_cmp(a));
    Ok(curve)
}

/// One token's attention laid out on one image's patch grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseGrid {
    pub camera: u32,
    pub timestep: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Head-averaged attention of `token`, renormalized over image keys and split
/// per image.
pub fn response_map(record: &AttentionRecord, token: usize) -> Result<Vec<ResponseGrid>> {
    check(record)?;
    if token >= record.k {
        return Err(Error::Invalid(format!("token {token} of {}", record.k)));
    }
    let mean = head_mean(record, token);
    let total: f64 = mean.iter().sum();
    let mut offset = 0;
    Ok(record
        .slots
        .iter()
        .map(|s| {
            let n = s.rows * s.cols;
            let values = mean[offset..offset + n].iter().map(|v| v / total).collect();
            offset += n;
            ResponseGrid { camera: s.camera_id, timestep: s.timestep_index, rows: s.rows, cols: s.cols, values }
        })
        .collect())
}

/// Whether the strongest token's argmax lands within one patch (Chebyshev)
/// of the marker in the image it points at.
pub fn localizes_marker(responses: &[TokenResponse], clip: &Clip, patch_size: usize) -> bool {
    let Some(top) = responses.iter().find(|r| r.rank == 0) else {
        return false;
    };
    let loc = top.argmax_key;
    let Some(cam) = clip.camera_ids.iter().position(|&c| c == loc.camera) else {
        return false;
    };
    match clip.marker_pixel(cam, loc.timestep) {
        Some((r, c)) => {
            let (mr, mc) = ((r / patch_size as f64) as usize, (c / patch_size as f64) as usize);
            mr.abs_diff(loc.row) <= 1 && mc.abs_diff(loc.col) <= 1
        }
        None => false,
    }
}
