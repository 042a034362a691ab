//! minADE evaluation, the constant-velocity comparator and throughput.

use std::time::Instant;

use flex_core::autodiff::ParamStore;
use flex_core::metrics::{bucket_steps, bucketed_min_ade, constant_velocity, AdeMean, BucketedAde, BUCKET_SECONDS};
use flex_core::model::FlexModel;
use flex_core::rng;
use flex_core::worldsim::Clip;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{FlexError, Result};

/// Waypoint and history spacing of generated clips, seconds.
pub const WAYPOINT_DT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub seconds: f64,
    pub steps: usize,
    pub minade6: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean of the per-bucket values.
    pub minade6: f64,
    pub buckets: Vec<BucketReport>,
    pub samples: usize,
    pub clips: usize,
    pub clips_per_sec: f64,
    pub constant_velocity_minade: f64,
    pub config_hash: String,
}

/// Sampled trajectories of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSamples {
    pub clip_id: u64,
    pub trajectories: Vec<Vec<[f32; 2]>>,
}

fn report(mean: &BucketedAde, steps: &[usize; 4]) -> Vec<BucketReport> {
    (0..4)
        .map(|i| BucketReport { seconds: BUCKET_SECONDS[i], steps: steps[i], minade6: mean.buckets[i] })
        .collect()
}

/// Bucketed minADE of the constant-velocity extrapolation over `clips`.
pub fn constant_velocity_ade(clips: &[&Clip]) -> Result<BucketedAde> {
    let mut acc = AdeMean::default();
    for c in clips {
        let steps = bucket_steps(WAYPOINT_DT, c.horizon)?;
        let pred = constant_velocity(c.history(), c.horizon, WAYPOINT_DT, WAYPOINT_DT)?;
        acc.add(&bucketed_min_ade(&[pred], c.future(), &steps)?);
    }
    Ok(acc.mean())
}

/// Samples `config.samples` futures per clip and scores them. The sampling
/// stream of each clip depends only on the seed and the clip id.
pub fn evaluate(config: &RunConfig, model: &FlexModel, store: &ParamStore, clips: &[&Clip]) -> Result<(EvalReport, Vec<ClipSamples>)> {
    let clips: Vec<&Clip> = match config.eval_clips {
        0 => clips.to_vec(),
        n => clips.iter().take(n).copied().collect(),
    };
    if clips.is_empty() {
        return Err(FlexError::Config("no evaluation clips".into()));
    }
    let steps = bucket_steps(WAYPOINT_DT, config.horizon)?;
    let mut acc = AdeMean::default();
    let mut all = Vec::with_capacity(clips.len());
    let mut busy = 0.0;
    for c in &clips {
        let mut r = rng::stream_n(config.seed, "eval", c.id);
        let t0 = Instant::now();
        let preds = model.predict(store, c, config.samples, config.temperature, &mut r)?;
        busy += t0.elapsed().as_secs_f64();
        acc.add(&bucketed_min_ade(&preds, c.future(), &steps)?);
        all.push(ClipSamples { clip_id: c.id, trajectories: preds });
    }
    let mean = acc.mean();
    let cv = constant_velocity_ade(&clips)?;
    let report = EvalReport {
        minade6: mean.overall,
        buckets: report(&mean, &steps),
        samples: config.samples,
        clips: clips.len(),
        clips_per_sec: clips.len() as f64 / busy.max(1e-9),
        constant_velocity_minade: cv.overall,
        config_hash: config.hash(),
    };
    Ok((report, all))
}

/// `clip_id,sample_idx,step,x,y` rows.
pub fn samples_csv(samples: &[ClipSamples]) -> String {
    let mut out = String::from("clip_id,sample_idx,step,x,y\n");
    for s in samples {
        for (i, traj) in s.trajectories.iter().enumerate() {
            for (j, p) in traj.iter().enumerate() {
                out.push_str(&format!("{},{},{},{},{}\n", s.clip_id, i, j + 1, p[0], p[1]));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mean_clips_per_sec: f64,
    pub std_clips_per_sec: f64,
    pub reps: Vec<f64>,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    /// Visual tokens the policy reads per clip.
    pub policy_tokens: usize,
}

/// One inference: scene encoding, a greedy rollout and detokenization.
fn infer(model: &FlexModel, store: &ParamStore, clip: &Clip, r: &mut rng::Rng) -> Result<usize> {
    let preds = model.predict(store, clip, 1, 0.0, r)?;
    Ok(preds.len())
}

/// Clips per second over `timed` inferences after `warmup` untimed ones,
/// repeated `reps` times. Clips are cycled if fewer are given.
pub fn throughput(model: &FlexModel, store: &ParamStore, clips: &[&Clip], warmup: usize, timed: usize, reps: usize) -> Result<BenchReport> {
    if clips.is_empty() || timed == 0 || reps == 0 {
        return Err(FlexError::Config("benchmark needs clips, timed iterations and repetitions".into()));
    }
    let mut r = rng::stream(0, "bench");
    for i in 0..warmup {
        infer(model, store, clips[i % clips.len()], &mut r)?;
    }
    let mut rates = Vec::with_capacity(reps);
    for rep in 0..reps {
        let t0 = Instant::now();
        for i in 0..timed {
            infer(model, store, clips[(rep * timed + i) % clips.len()], &mut r)?;
        }
        rates.push(timed as f64 / t0.elapsed().as_secs_f64().max(1e-9));
    }
    let mean = rates.iter().sum::<f64>() / reps as f64;
    let var = rates.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / reps as f64;
    Ok(BenchReport {
        mean_clips_per_sec: mean,
        std_clips_per_sec: var.sqrt(),
        reps: rates,
        warmup_iters: warmup,
        timed_iters: timed,
        policy_tokens: model.config.policy_scene_tokens(),
    })
}
