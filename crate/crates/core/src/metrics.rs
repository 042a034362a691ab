//! Displacement metrics and the constant-velocity comparator.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldsim::EgoState;

/// Horizons (seconds) averaged into the headline metric.
pub const BUCKET_SECONDS: [f64; 4] = [0.5, 1.0, 3.0, 5.0];

/// Average displacement of one trajectory over its first `steps` waypoints.
pub fn ade(pred: &[[f32; 2]], gt: &[[f32; 2]], steps: usize) -> f64 {
    pred[..steps]
        .iter()
        .zip(&gt[..steps])
        .map(|(p, g)| (p[0] as f64 - g[0] as f64).hypot(p[1] as f64 - g[1] as f64))
        .sum::<f64>()
        / steps as f64
}

/// Minimum over predictions of the mean L2 error over the first
/// `horizon_steps` waypoints.
pub fn min_ade(preds: &[Vec<[f32; 2]>], gt: &[[f32; 2]], horizon_steps: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Invalid("min_ade needs at least one prediction".into()));
    }
    if horizon_steps == 0 || horizon_steps > gt.len() {
        return Err(Error::Invalid(format!("horizon {horizon_steps} outside 1..={}", gt.len())));
    }
    if let Some(p) = preds.iter().find(|p| p.len() < horizon_steps) {
        return Err(Error::Invalid(format!("prediction of {} waypoints for horizon {horizon_steps}", p.len())));
    }
    Ok(preds.iter().map(|p| ade(p, gt, horizon_steps)).fold(f64::INFINITY, f64::min))
}

/// Waypoint counts covering each bucket horizon.
pub fn bucket_steps(waypoint_dt: f64, horizon: usize) -> Result<[usize; 4]> {
    let mut out = [0; 4];
    for (o, s) in out.iter_mut().zip(BUCKET_SECONDS) {
        let steps = (s / waypoint_dt).round() as usize;
        if steps == 0 || steps > horizon {
            return Err(Error::Config(format!(
                "{s} s horizon needs {steps} waypoints at {waypoint_dt} s spacing, have {horizon}"
            )));
        }
        *o = steps;
    }
    Ok(out)
}

/// minADE per bucket and their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketedAde {
    pub buckets: [f64; 4],
    pub overall: f64,
}

pub fn bucketed_min_ade(preds: &[Vec<[f32; 2]>], gt: &[[f32; 2]], steps: &[usize; 4]) -> Result<BucketedAde> {
    let mut buckets = [0.0; 4];
    for (b, &s) in buckets.iter_mut().zip(steps) {
        *b = min_ade(preds, gt, s)?;
    }
    Ok(BucketedAde { buckets, overall: buckets.iter().sum::<f64>() / 4.0 })
}

/// Running mean of [`BucketedAde`] over clips.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AdeMean {
    sums: [f64; 4],
    pub count: usize,
}

impl AdeMean {
    pub fn add(&mut self, b: &BucketedAde) {
        for (s, v) in self.sums.iter_mut().zip(b.buckets) {
            *s += v;
        }
        self.count += 1;
    }

    pub fn mean(&self) -> BucketedAde {
        let n = self.count.max(1) as f64;
        let buckets = self.sums.map(|s| s / n);
        BucketedAde { buckets, overall: buckets.iter().sum::<f64>() / 4.0 }
    }
}

/// Extrapolates the last history displacement linearly, in the frame of the
/// last history state.
pub fn constant_velocity(history: &[EgoState], horizon: usize, waypoint_dt: f64, history_dt: f64) -> Result<Vec<[f32; 2]>> {
    if history.len() < 2 {
        return Err(Error::Invalid(format!("constant velocity needs 2 history states, got {}", history.len())));
    }
    let (a, b) = (&history[history.len() - 2], &history[history.len() - 1]);
    let vx = (b.x as f64 - a.x as f64) / history_dt;
    let vy = (b.y as f64 - a.y as f64) / history_dt;
    Ok((1..=horizon)
        .map(|j| {
            let t = j as f64 * waypoint_dt;
            [(b.x as f64 + vx * t) as f32, (b.y as f64 + vy * t) as f32]
        })
        .collect())
}
