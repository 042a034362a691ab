//! Ablation sweeps: one train + eval + benchmark per grid point.

use std::path::Path;
use std::str::FromStr;

use flex_core::policy::Representation;
use flex_core::scene::EncoderVariant;
use flex_core::worldsim::{Clip, Split};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{FlexError, Result};
use crate::eval::{evaluate, throughput};
use crate::trainer::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Tokens,
    Layers,
    Attention,
    Interleave,
    Cameras,
    Patchifier,
}

impl Axis {
    pub const ALL: [Axis; 6] = [Axis::Tokens, Axis::Layers, Axis::Attention, Axis::Interleave, Axis::Cameras, Axis::Patchifier];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Tokens => "tokens",
            Axis::Layers => "layers",
            Axis::Attention => "attention",
            Axis::Interleave => "interleave",
            Axis::Cameras => "cameras",
            Axis::Patchifier => "patchifier",
        }
    }

    pub fn default_grid(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::Tokens => &["18", "45", "90", "180", "450", "900"],
            Axis::Layers => &["1", "2", "4", "8"],
            Axis::Attention => &["per_image_cross", "per_image_self", "joint_cross", "joint_self"],
            Axis::Interleave => &["baseline_non_interleave", "baseline_interleave", "flex_non_interleave", "flex_interleave"],
            Axis::Cameras => &["1", "2", "4", "7"],
            Axis::Patchifier => &["small", "base", "large"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl FromStr for Axis {
    type Err = FlexError;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| FlexError::Config(format!("unknown axis `{s}`")))
    }
}

/// Transformer depth of each patchifier size; width stays at the base config.
pub fn patchifier_preset(name: &str) -> Option<usize> {
    match name {
        "small" => Some(0),
        "base" => Some(2),
        "large" => Some(4),
        _ => None,
    }
}

fn parse_usize(axis: Axis, value: &str) -> Result<usize> {
    value.parse().map_err(|_| FlexError::Config(format!("{}: `{value}` is not a count", axis.name())))
}

/// Configuration of one sweep point, not yet validated. Ablation runs train
/// stage 1 only.
pub fn point_config(base: &RunConfig, axis: Axis, value: &str) -> Result<RunConfig> {
    let mut c = RunConfig { stage2_steps: 0, ..base.clone() };
    match axis {
        Axis::Tokens => c.k = parse_usize(axis, value)?,
        Axis::Layers => c.layers = parse_usize(axis, value)?,
        Axis::Cameras => c.cameras = parse_usize(axis, value)?,
        Axis::Attention => {
            c.repr = Representation::Flex;
            c.variant = EncoderVariant::parse(value)
                .ok_or_else(|| FlexError::Config(format!("attention: unknown variant `{value}`")))?;
        }
        Axis::Interleave => {
            let (repr, mode) = value
                .split_once('_')
                .ok_or_else(|| FlexError::Config(format!("interleave: bad cell `{value}`")))?;
            c.repr = match repr {
                "flex" => Representation::Flex,
                "baseline" => Representation::Baseline,
                _ => return Err(FlexError::Config(format!("interleave: unknown representation `{repr}`"))),
            };
            c.interleave = match mode {
                "interleave" => true,
                "non_interleave" => false,
                _ => return Err(FlexError::Config(format!("interleave: unknown mode `{mode}`"))),
            };
        }
        Axis::Patchifier => {
            c.patchifier_depth = patchifier_preset(value)
                .ok_or_else(|| FlexError::Config(format!("patchifier: unknown size `{value}`")))?;
        }
    }
    Ok(c)
}

/// One CSV row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub repr: String,
    pub variant: String,
    pub interleave: bool,
    pub k: usize,
    pub layers: usize,
    pub cameras: usize,
    pub d_enc: usize,
    pub policy_tokens: usize,
    pub minade6: f64,
    pub minade6_buckets: [f64; 4],
    pub constant_velocity_minade: f64,
    pub clips_per_sec: f64,
    pub clips_per_sec_std: f64,
    pub status: String,
    pub error: String,
}

pub const SWEEP_HEADER: &str = "axis,value,repr,variant,interleave,k,layers,cameras,d_enc,policy_tokens,minade6,minade6_0.5s,minade6_1s,minade6_3s,minade6_5s,cv_minade,clips_per_sec,clips_per_sec_std,status,error";
pub const PARETO_HEADER: &str = "axis,value,minade6,clips_per_sec";

fn row_for(axis: Axis, value: &str, c: Option<&RunConfig>) -> SweepRow {
    let d = RunConfig::default();
    let c = c.unwrap_or(&d);
    SweepRow {
        axis: axis.name().into(),
        value: value.into(),
        repr: match c.repr {
            Representation::Flex => "flex".into(),
            Representation::Baseline => "baseline".into(),
        },
        variant: c.variant.name().into(),
        interleave: c.interleave,
        k: c.k,
        layers: c.layers,
        cameras: c.cameras,
        d_enc: c.d_enc,
        policy_tokens: c.model().map(|m| m.policy_scene_tokens()).unwrap_or(0),
        minade6: f64::NAN,
        minade6_buckets: [f64::NAN; 4],
        constant_velocity_minade: f64::NAN,
        clips_per_sec: f64::NAN,
        clips_per_sec_std: f64::NAN,
        status: "error".into(),
        error: String::new(),
    }
}

fn adapt(clips: &[&Clip], cameras: usize) -> Result<Vec<Clip>> {
    clips.iter().map(|c| Ok(if c.cameras == cameras { (*c).clone() } else { c.with_cameras(cameras)? })).collect()
}

fn run_point(cfg: &RunConfig, data: &Dataset, row: &mut SweepRow) -> Result<()> {
    cfg.validate()?;
    let have = data.header.world.cameras;
    if cfg.cameras > have {
        return Err(FlexError::Config(format!("dataset has {have} cameras, point needs {}", cfg.cameras)));
    }
    let train_clips = adapt(&data.split(Split::Train), cfg.cameras)?;
    let test_clips = adapt(&data.split(Split::Test), cfg.cameras)?;
    let train_refs: Vec<&Clip> = train_clips.iter().collect();
    let test_refs: Vec<&Clip> = test_clips.iter().collect();
    let t = train(cfg, &train_refs, None, None)?;
    let (report, _) = evaluate(cfg, &t.model, &t.store, &test_refs)?;
    let bench = throughput(&t.model, &t.store, &test_refs, cfg.bench_warmup, cfg.bench_iters, cfg.bench_reps)?;
    row.minade6 = report.minade6;
    for (b, r) in row.minade6_buckets.iter_mut().zip(&report.buckets) {
        *b = r.minade6;
    }
    row.constant_velocity_minade = report.constant_velocity_minade;
    row.clips_per_sec = bench.mean_clips_per_sec;
    row.clips_per_sec_std = bench.std_clips_per_sec;
    Ok(())
}

/// Runs every point of `grid` in order. A failing point yields an error row
/// and the sweep continues.
pub fn sweep(base: &RunConfig, axis: Axis, grid: &[String], data: &Dataset) -> Vec<SweepRow> {
    grid.iter()
        .map(|value| {
            let cfg = point_config(base, axis, value);
            let mut row = row_for(axis, value, cfg.as_ref().ok());
            let outcome = cfg.and_then(|c| run_point(&c, data, &mut row));
            match outcome {
                Ok(()) => row.status = "ok".into(),
                Err(e) => {
                    log::warn!("{} = {value} failed: {e}", axis.name());
                    row.error = e.to_string();
                }
            }
            row
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let b = r.minade6_buckets;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.axis,
            csv_field(&r.value),
            r.repr,
            r.variant,
            r.interleave,
            r.k,
            r.layers,
            r.cameras,
            r.d_enc,
            r.policy_tokens,
            r.minade6,
            b[0],
            b[1],
            b[2],
            b[3],
            r.constant_velocity_minade,
            r.clips_per_sec,
            r.clips_per_sec_std,
            r.status,
            csv_field(&r.error)
        ));
    }
    out
}

/// Successful rows not dominated in (lower minADE, higher throughput), by
/// descending throughput.
pub fn pareto(rows: &[SweepRow]) -> Vec<&SweepRow> {
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.status == "ok").collect();
    let mut front: Vec<&SweepRow> = ok
        .iter()
        .copied()
        .filter(|r| {
            !ok.iter().any(|o| {
                o.minade6 <= r.minade6 && o.clips_per_sec >= r.clips_per_sec && (o.minade6 < r.minade6 || o.clips_per_sec > r.clips_per_sec)
            })
        })
        .collect();
    front.sort_by(|a, b| b.clips_per_sec.total_cmp(&a.clips_per_sec));
    front
}

pub fn pareto_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{PARETO_HEADER}\n");
    for r in pareto(rows) {
        out.push_str(&format!("{},{},{},{}\n", r.axis, csv_field(&r.value), r.minade6, r.clips_per_sec));
    }
    out
}

pub fn write_outputs(out_dir: &Path, rows: &[SweepRow]) -> Result<()> {
    crate::binio::write_file(&out_dir.join("sweep.csv"), sweep_csv(rows).as_bytes())?;
    crate::binio::write_file(&out_dir.join("pareto.csv"), pareto_csv(rows).as_bytes())
}
