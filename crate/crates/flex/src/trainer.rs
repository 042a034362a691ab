//! Two-stage training loop with JSON-lines metrics and checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use flex_core::autodiff::ParamStore;
use flex_core::model::FlexModel;
use flex_core::optim::{lr_schedule, AdamW};
use flex_core::patchify::PATCHIFIER_PREFIX;
use flex_core::rng;
use flex_core::train::train_step;
use flex_core::worldsim::Clip;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{FlexError, Result};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: u8,
    pub loss: f32,
    pub lr: f64,
    pub grad_norm: f32,
    pub clips_per_sec: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: FlexModel,
    pub store: ParamStore,
    pub opt: AdamW,
    pub log: Vec<StepRecord>,
}

pub fn stage_of(config: &RunConfig, step: u64) -> u8 {
    if step < config.stage1_steps {
        1
    } else {
        2
    }
}

/// Learning rate of global step `step`: warmup then cosine over stage 1,
/// constant afterwards.
pub fn learning_rate(config: &RunConfig, step: u64) -> Result<f64> {
    if step < config.stage1_steps {
        Ok(lr_schedule(step + 1, config.warmup, config.lr_stage1, config.stage1_steps)?)
    } else {
        Ok(config.lr_stage2)
    }
}

/// Clip indices of the batch at `step`; a pure function of seed and step so
/// a resumed run draws the same batches.
pub fn batch_indices(config: &RunConfig, step: u64, available: usize) -> Vec<usize> {
    let mut r = rng::stream_n(config.seed, "batch", step);
    sample(&mut r, available, config.batch_size.min(available)).into_vec()
}

pub fn checkpoint_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("ckpt")
}

struct MetricsLog(Option<BufWriter<File>>);

impl MetricsLog {
    fn open(out_dir: Option<&Path>, append: bool) -> Result<Self> {
        let Some(dir) = out_dir else { return Ok(Self(None)) };
        let path = dir.join("metrics.jsonl");
        std::fs::create_dir_all(dir).map_err(|e| FlexError::output(&path, e))?;
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| FlexError::output(&path, e))?;
        Ok(Self(Some(BufWriter::new(f))))
    }

    fn write(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| FlexError::Output { path: "metrics.jsonl".into(), source: e })?;
        }
        Ok(())
    }
}

/// Trains on `clips` from scratch, or from `resume`, until the configured
/// step count. Checkpoints land in `out_dir/ckpt` when an output directory is
/// given.
pub fn train(config: &RunConfig, clips: &[&Clip], out_dir: Option<&Path>, resume: Option<(Checkpoint, FlexModel)>) -> Result<Trained> {
    config.validate()?;
    if clips.is_empty() {
        return Err(FlexError::Config("no training clips".into()));
    }
    let (model, mut store, mut opt) = match resume {
        Some((ck, model)) => {
            if ck.config != *config {
                return Err(FlexError::Config("checkpoint was written by a different configuration".into()));
            }
            (model, ck.store, ck.opt)
        }
        None => checkpoint::init(config)?,
    };
    let start = opt.step;
    let mut metrics = MetricsLog::open(out_dir, start > 0)?;
    let total = config.total_steps();
    let mut log = Vec::new();
    for step in start..total {
        let stage = stage_of(config, step);
        let freeze = stage == 1 && config.model()?.patchifier.frozen_stage1;
        store.set_frozen_prefix(PATCHIFIER_PREFIX, freeze);
        let lr = learning_rate(config, step)?;
        let batch: Vec<&Clip> = batch_indices(config, step, clips.len()).into_iter().map(|i| clips[i]).collect();
        let t0 = Instant::now();
        let stats = train_step(&model, &mut store, &mut opt, &batch, lr as f32).map_err(|e| match e {
            flex_core::Error::NonFiniteLoss { value, .. } => FlexError::Diverged { step, value },
            e => FlexError::Core(e),
        })?;
        let rec = StepRecord {
            step,
            stage,
            loss: stats.loss,
            lr,
            grad_norm: stats.grad_norm,
            clips_per_sec: batch.len() as f64 / t0.elapsed().as_secs_f64().max(1e-9),
        };
        metrics.write(&rec)?;
        if step % 50 == 0 || step + 1 == total {
            log::info!("step {step} stage {stage} loss {:.4} lr {:.2e} {:.1} clips/s", rec.loss, lr, rec.clips_per_sec);
        }
        log.push(rec);
        if let Some(dir) = out_dir {
            let done = step + 1;
            let ckpt = checkpoint_dir(dir);
            if done == config.stage1_steps {
                checkpoint::save(&ckpt.join("stage1.ckpt"), config, &store, &opt)?;
            }
            if done == total && config.stage2_steps > 0 {
                checkpoint::save(&ckpt.join("stage2.ckpt"), config, &store, &opt)?;
            }
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                checkpoint::save(&ckpt.join(format!("step{done}.ckpt")), config, &store, &opt)?;
            }
        }
    }
    Ok(Trained { model, store, opt, log })
}

/// The checkpoint a finished run leaves behind.
pub fn final_checkpoint(config: &RunConfig, out_dir: &Path) -> PathBuf {
    let name = if config.stage2_steps > 0 { "stage2.ckpt" } else { "stage1.ckpt" };
    checkpoint_dir(out_dir).join(name)
}
