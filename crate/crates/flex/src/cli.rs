//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use flex_core::worldsim::{Clip, Scenario, Split};

use crate::ablate::{self, Axis, PARETO_HEADER, SWEEP_HEADER};
use crate::analyze;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{read_dataset, write_dataset, Dataset};
use crate::error::{FlexError, Result};
use crate::eval::{evaluate, samples_csv, throughput};
use crate::manifest::{peek_dataset, Manifest};
use crate::trainer::{self, train};

const SCHEMAS: &str = "\
Output files (under --out-dir):
  manifest.json   effective config, seed, dataset header SHA-256, arguments
  metrics.jsonl   one JSON object per step: step, stage, loss, lr, grad_norm, clips_per_sec
  report.json     eval: minade6, buckets[{seconds, steps, minade6}], samples, clips,
                  clips_per_sec, constant_velocity_minade, config_hash
  samples.csv     clip_id,sample_idx,step,x,y
  bench.json      mean_clips_per_sec, std_clips_per_sec, reps, warmup_iters, timed_iters, policy_tokens
  sweep.csv       axis,value,repr,variant,interleave,k,layers,cameras,d_enc,policy_tokens,minade6,
                  minade6_0.5s,minade6_1s,minade6_3s,minade6_5s,cv_minade,clips_per_sec,
                  clips_per_sec_std,status,error
  pareto.csv      axis,value,minade6,clips_per_sec
  responses.csv   token_index,mean_max_response,rank
  curve.csv       rank,mean_max_response
  maps/*.pgm      ASCII PGM response grids, one per (token, camera, timestep)
  attn/*.attn     FLEXATTN attention dumps
  ckpt/*.ckpt     FLEXCKPT checkpoints (stage1, stage2, stepN)

Plotting: every CSV is comma separated with a header row, so gnuplot reads it with
  set datafile separator ','; plot 'pareto.csv' using 4:3 with linespoints

Exit codes: 0 success, 2 configuration error, 3 runtime error.";

#[derive(Debug, Parser)]
#[command(name = "flex", version, about = "Scene-token compression for multi-camera trajectory prediction", after_help = SCHEMAS)]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed: parameter init, batch order and sampling. For `gen-data` it
    /// is the dataset seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "flex-out")]
    pub out_dir: PathBuf,
    /// Overrides one configuration key, e.g. `--set k=18`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenData),
    /// Two-stage training; writes metrics.jsonl and ckpt/.
    Train(Train),
    /// minADE_6 on the test split; writes report.json and samples.csv.
    Eval(Eval),
    /// Inference throughput, mean and std over repetitions; writes bench.json.
    Bench(Bench),
    /// Train and evaluate every point of an ablation grid; writes sweep.csv and pareto.csv.
    #[command(after_help = "sweep.csv: axis,value,repr,variant,interleave,k,layers,cameras,d_enc,policy_tokens,minade6,minade6_0.5s,minade6_1s,minade6_3s,minade6_5s,cv_minade,clips_per_sec,clips_per_sec_std,status,error\npareto.csv: axis,value,minade6,clips_per_sec")]
    Ablate(Ablate),
    /// Attention-response report from FLEXATTN dumps.
    #[command(after_help = "responses.csv: token_index,mean_max_response,rank\ncurve.csv: rank,mean_max_response\nmaps/*.pgm: ASCII PGM grids")]
    Analyze(Analyze),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub clips: Option<u64>,
    /// Dataset file; defaults to <out-dir>/data.flexdata.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub cameras: Option<usize>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// Force one scenario: lane_follow, lane_change, turn, stop or marker_probe.
    #[arg(long)]
    pub scenario: Option<String>,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset file; defaults to the config's `dataset`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Train {
    #[command(flatten)]
    pub data: DataArg,
    /// Continue from a checkpoint written by the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[command(flatten)]
    pub data: DataArg,
    /// Trained weights; without it a freshly initialized model is scored.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Bench {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Ablate {
    #[command(flatten)]
    pub data: DataArg,
    /// tokens, layers, attention, interleave, cameras or patchifier.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated grid; defaults to the axis's full grid.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<String>,
}

#[derive(Debug, Args)]
pub struct Analyze {
    /// Directory of .attn dumps; defaults to <out-dir>/attn.
    #[arg(long)]
    pub attn: Option<PathBuf>,
    /// Dump fresh attention from this checkpoint first (needs --data).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArg,
    /// Number of test clips to dump (0 means all).
    #[arg(long, default_value_t = 0)]
    pub clips: usize,
    /// Response maps are written for this many top-ranked tokens.
    #[arg(long, default_value_t = 4)]
    pub top: usize,
}

/// Applies `key=value` overrides through the JSON form, so keys and value
/// types are checked like a config file.
pub fn apply_overrides(config: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    let mut v = serde_json::to_value(config)?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| FlexError::Config(format!("override `{o}` is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let obj = v.as_object_mut().expect("config is an object");
        if !obj.contains_key(key) {
            return Err(FlexError::Config(format!("unknown config key `{key}`")));
        }
        obj.insert(key.to_string(), value);
    }
    serde_json::from_value(v).map_err(|e| FlexError::Config(e.to_string()))
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut c = apply_overrides(&base, &cli.overrides)?;
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    Ok(c)
}

fn data_path(arg: &DataArg, config: &RunConfig) -> Result<PathBuf> {
    arg.data
        .clone()
        .or_else(|| config.dataset.clone())
        .ok_or_else(|| FlexError::Config("no dataset: pass --data or set `dataset`".into()))
}

/// Writes the manifest, then loads the dataset it names.
fn begin(command: &str, config: &RunConfig, out_dir: &Path, args: &[String], data: &Path) -> Result<Dataset> {
    let (_, sha) = peek_dataset(data)?;
    Manifest::new(command, config, args.to_vec()).with_dataset(data, sha).write(out_dir)?;
    read_dataset(data)
}

fn load_model(config: &RunConfig, ckpt: Option<&Path>) -> Result<(flex_core::model::FlexModel, flex_core::autodiff::ParamStore)> {
    match ckpt {
        Some(p) => {
            let (ck, model) = checkpoint::load(p)?;
            Ok((model, ck.store))
        }
        None => {
            let (model, store, _) = checkpoint::init(config)?;
            Ok((model, store))
        }
    }
}

/// Configuration stored in a checkpoint wins over the command line's model
/// settings; evaluation settings still come from the command line.
fn config_for_checkpoint(config: &RunConfig, ckpt: Option<&Path>) -> Result<RunConfig> {
    let Some(p) = ckpt else { return Ok(config.clone()) };
    let (header, _, _): (checkpoint::CheckpointHeader, _, _) =
        crate::binio::read_preamble(p, &crate::binio::read_file(p)?, checkpoint::MAGIC, checkpoint::VERSION)?;
    Ok(RunConfig {
        samples: config.samples,
        temperature: config.temperature,
        eval_clips: config.eval_clips,
        bench_warmup: config.bench_warmup,
        bench_iters: config.bench_iters,
        bench_reps: config.bench_reps,
        seed: config.seed,
        ..header.config
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    crate::binio::write_file(path, &serde_json::to_vec_pretty(value)?)
}

fn parse_scenario(s: &str) -> Result<Scenario> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| FlexError::Config(format!("unknown scenario `{s}`")))
}

pub fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    let mut config = effective_config(&cli)?;
    let out = cli.out_dir.clone();
    match &cli.command {
        Command::GenData(g) => {
            if let Some(c) = g.cameras {
                config.cameras = c;
            }
            if let Some(t) = g.timesteps {
                config.timesteps = t;
            }
            let clips = g.clips.unwrap_or(config.clips);
            config.clips = clips;
            let mut header = config.dataset_header(clips);
            if let Some(s) = &g.scenario {
                header.world.scenario = Some(parse_scenario(s)?);
            }
            header.validate()?;
            let path = g.out.clone().unwrap_or_else(|| out.join("data.flexdata"));
            Manifest::new("gen-data", &config, args).write(&out)?;
            let data = Dataset::generate(header)?;
            write_dataset(&path, &header, &data.clips)?;
            println!(
                "{} clips ({} train, {} test) -> {}",
                data.clips.len(),
                data.split(Split::Train).len(),
                data.split(Split::Test).len(),
                path.display()
            );
        }
        Command::Train(t) => {
            config.validate()?;
            let path = data_path(&t.data, &config)?;
            let data = begin("train", &config, &out, &args, &path)?;
            let resume = t.resume.as_deref().map(checkpoint::load).transpose()?;
            let clips = data.split(Split::Train);
            let trained = train(&config, &clips, Some(&out), resume)?;
            if let Some(last) = trained.log.last() {
                println!("step {} loss {:.4} -> {}", last.step, last.loss, trainer::final_checkpoint(&config, &out).display());
            }
        }
        Command::Eval(e) => {
            let config = config_for_checkpoint(&config, e.checkpoint.as_deref())?;
            config.validate()?;
            let path = data_path(&e.data, &config)?;
            let data = begin("eval", &config, &out, &args, &path)?;
            let (model, store) = load_model(&config, e.checkpoint.as_deref())?;
            let (report, samples) = evaluate(&config, &model, &store, &data.split(Split::Test))?;
            write_json(&out.join("report.json"), &report)?;
            crate::binio::write_file(&out.join("samples.csv"), samples_csv(&samples).as_bytes())?;
            println!(
                "minADE6 {:.4} m over {} clips (constant velocity {:.4} m)",
                report.minade6, report.clips, report.constant_velocity_minade
            );
        }
        Command::Bench(b) => {
            let config = config_for_checkpoint(&config, b.checkpoint.as_deref())?;
            config.validate()?;
            let path = data_path(&b.data, &config)?;
            let data = begin("bench", &config, &out, &args, &path)?;
            let (model, store) = load_model(&config, b.checkpoint.as_deref())?;
            let clips = data.split(Split::Test);
            let r = throughput(&model, &store, &clips, config.bench_warmup, config.bench_iters, config.bench_reps)?;
            write_json(&out.join("bench.json"), &r)?;
            println!("{:.3} ± {:.3} clips/s over {} reps ({} policy tokens)", r.mean_clips_per_sec, r.std_clips_per_sec, r.reps.len(), r.policy_tokens);
        }
        Command::Ablate(a) => {
            let axis: Axis = a.axis.parse()?;
            let grid = if a.grid.is_empty() { axis.default_grid() } else { a.grid.clone() };
            let path = data_path(&a.data, &config)?;
            let data = begin("ablate", &config, &out, &args, &path)?;
            let rows = ablate::sweep(&config, axis, &grid, &data);
            ablate::write_outputs(&out, &rows)?;
            println!("{SWEEP_HEADER}");
            print!("{}", ablate::sweep_csv(&rows).split_once('\n').map(|x| x.1).unwrap_or(""));
            log::info!("pareto front ({PARETO_HEADER}) written to {}", out.join("pareto.csv").display());
        }
        Command::Analyze(a) => {
            let dir = a.attn.clone().unwrap_or_else(|| out.join("attn"));
            match &a.checkpoint {
                Some(ck) => {
                    let path = data_path(&a.data, &config)?;
                    let data = begin("analyze", &config, &out, &args, &path)?;
                    let (ckpt, model) = checkpoint::load(ck)?;
                    let mut clips: Vec<&Clip> = data.split(Split::Test);
                    if a.clips > 0 {
                        clips.truncate(a.clips);
                    }
                    for c in clips {
                        analyze::write_attention(&dir, c.id, &model.attention_record(&ckpt.store, c)?)?;
                    }
                }
                None => Manifest::new("analyze", &config, args).write(&out)?,
            }
            let dumps = analyze::read_attention_dir(&dir)?;
            let o = analyze::analyze(&dumps, &out, a.top)?;
            println!("{} dumps -> {}, {}, {} maps", dumps.len(), o.responses.display(), o.curve.display(), o.maps.len());
        }
    }
    Ok(())
}
