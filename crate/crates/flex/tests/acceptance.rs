//! Acceptance suite. Runs every criterion in sequence (so timings are not
//! distorted by parallel tests) and prints one PASS/FAIL line per criterion.
//!
//! `cargo test --release -p flex --test acceptance -- 4 8` runs a subset.

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use flex::checkpoint;
use flex::config::RunConfig;
use flex::dataset::Dataset;
use flex::eval::{evaluate, throughput, BenchReport};
use flex::trainer::{train, StepRecord, Trained};
use flex_core::analysis::{localizes_marker, sorted_response_curve, token_responses};
use flex_core::autodiff::{DiffArray, Mask, ParamStore, Tape, Var};
use flex_core::metrics::min_ade;
use flex_core::model::FlexModel;
use flex_core::patchify::TokenGrid;
use flex_core::policy::{Representation, SegmentKind};
use flex_core::rng;
use flex_core::scene::{EncoderConfig, EncoderVariant, SceneEncoder};
use flex_core::trajectory::WaypointVocab;
use flex_core::worldsim::{generate_clip_with_id, Clip, Scenario, Split, WorldConfig};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_array(shape: &[usize], seed: u64) -> DiffArray {
    let mut r = rng::stream_n(seed, "acceptance-array", 0);
    let n: usize = shape.iter().product();
    DiffArray::new(shape, (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Shared state: the dataset and the criterion-4 models are reused by
// criterion 8.

/// Reduced model for the training criteria; the desk model is used where
/// only a forward pass is needed.
const TRAINED: &str = r#"{
  "k": 18, "layers": 2, "heads": 2, "d_enc": 32, "d_llm": 64, "policy_blocks": 2,
  "x_bins": 64, "y_bins": 64,
  "stage1_steps": 2000, "stage2_steps": 0, "warmup": 100, "batch_size": 8,
  "lr_stage1": 1e-3, "lr_stage2": 1e-5, "clips": 2000
}"#;

const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Default)]
struct Shared {
    data: Option<Dataset>,
    interleaved: Vec<(u64, Trained)>,
}

impl Shared {
    fn base() -> RunConfig {
        serde_json::from_str(TRAINED).unwrap()
    }

    fn data(&mut self) -> Result<&Dataset, String> {
        if self.data.is_none() {
            let base = Self::base();
            self.data = Some(Dataset::generate(base.dataset_header(base.clips)).map_err(err)?);
        }
        Ok(self.data.as_ref().unwrap())
    }

    fn trained(&mut self, seed: u64, interleave: bool) -> Result<Trained, String> {
        if interleave {
            if let Some((_, t)) = self.interleaved.iter().find(|(s, _)| *s == seed) {
                return Ok(t.clone());
            }
        }
        let cfg = RunConfig { seed, interleave, ..Self::base() };
        let data = self.data()?;
        let t = train(&cfg, &data.split(Split::Train), None, None).map_err(err)?;
        if interleave {
            self.interleaved.push((seed, t.clone()));
        }
        Ok(t)
    }
}

// ---------------------------------------------------------------------------
// 1. Packed interleaved forward equals physically split prefixes.

fn c1_packing(_: &mut Shared) -> Outcome {
    let cfg = RunConfig::default();
    let (model, store, _) = checkpoint::init(&cfg).map_err(err)?;
    let clip = generate_clip_with_id(0, 11, &cfg.world()).map_err(err)?;
    let mc = model.config;
    ensure(mc.timesteps == 9 && mc.encoder.k == 90 && mc.horizon == 10, || "desk model is not T=9 K=90 H=10".into())?;
    let s = mc.scene_per_step();
    let v = mc.vocab.vocab_size();
    let mut tape = Tape::no_grad(&store);
    let input = model.policy_input(&mut tape, &clip).map_err(err)?;
    let x = model.policy.embed_sequence(&mut tape, &model.layout, &input).map_err(err)?;
    let packed = model.policy.forward(&mut tape, x, &model.mask).map_err(err)?;
    let packed = tape.data(packed).to_vec();
    let mut worst = 0.0f32;
    for k in 1..=mc.timesteps {
        let start = model.policy.embed_tokens(&mut tape, &[mc.vocab.start_token()]).map_err(err)?;
        let chunk = tape.slice_rows(input.scene, 0, k * s).map_err(err)?;
        let hist = tape.slice_rows(input.history, k - 1, 1).map_err(err)?;
        let fut = model.policy.embed_tokens(&mut tape, &input.futures[k - 1]).map_err(err)?;
        let seq = tape.concat_rows(&[start, chunk, hist, fut]).map_err(err)?;
        let n = tape.shape(seq)[0];
        let positions: Vec<usize> = (0..n).collect();
        let seq = model.policy.add_positions(&mut tape, seq, &positions).map_err(err)?;
        let pre = model.policy.forward(&mut tape, seq, &Mask::causal(n)).map_err(err)?;
        let pre = tape.data(pre);
        let hist_seg = model.layout.find(SegmentKind::History, k).ok_or("missing history segment")?;
        for j in 0..=mc.horizon {
            let (rp, rq) = (hist_seg.start + j, 1 + k * s + j);
            for c in 0..v {
                worst = worst.max((packed[rp * v + c] - pre[rq * v + c]).abs());
            }
        }
    }
    ensure(worst < 1e-5, || format!("max |packed - prefix| = {worst:.3e}"))?;
    Ok(format!("9 prefixes x 11 rows x {v} logits, max diff {worst:.2e} (< 1e-5)"))
}

// ---------------------------------------------------------------------------
// 2. Finite-difference gradient checks.

fn rel_err(a: f32, n: f32) -> f32 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

fn five_point(eval: impl Fn(f32) -> f64, eps: f32) -> f32 {
    let h = eps as f64;
    ((-eval(2.0 * eps) + 8.0 * eval(eps) - 8.0 * eval(-eps) + eval(-2.0 * eps)) / (12.0 * h)) as f32
}

/// Worst relative error of d f / d inputs over every input element.
fn fd_inputs(inputs: &[DiffArray], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f32 {
    let mut tape = Tape::detached();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone().with_grad())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut worst = 0.0f32;
    for (i, input) in inputs.iter().enumerate() {
        let g = tape.grad(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let eval = |delta: f32| {
                let mut p = inputs.to_vec();
                p[i].data_mut()[j] += delta;
                let mut t = Tape::detached();
                let vs: Vec<Var> = p.into_iter().map(|a| t.leaf(a)).collect();
                let l = f(&mut t, &vs);
                t.item(l) as f64
            };
            worst = worst.max(rel_err(g[j], five_point(eval, 1e-2)));
        }
    }
    worst
}

/// Worst relative error over up to `per_param` entries of every parameter.
fn fd_params(store: &ParamStore, per_param: usize, f: &dyn Fn(&mut Tape) -> Var) -> (f32, usize) {
    let mut tape = Tape::new(store);
    let loss = f(&mut tape);
    tape.backward(loss).unwrap();
    let grads = tape.param_grads();
    drop(tape);
    let (mut worst, mut checked) = (0.0f32, 0);
    for (id, g) in grads {
        let n = store.get(id).value.len();
        for j in (0..n).step_by((n / per_param).max(1)).take(per_param) {
            let eval = |delta: f32| {
                let mut s = store.clone();
                s.get_mut(id).value.data_mut()[j] += delta;
                let mut t = Tape::new(&s);
                let l = f(&mut t);
                t.item(l) as f64
            };
            worst = worst.max(rel_err(g[j], five_point(eval, 1e-2)));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Scalar readout with fixed distinct weights per element.
fn readout(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(random_array(&shape, seed));
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

type OpCase = (&'static str, Vec<DiffArray>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>);

fn op_cases() -> Vec<OpCase> {
    let a = |shape: &[usize], seed: u64| random_array(shape, seed);
    let mut mask = Mask::from_fn(4, 5, |r, c| (r + 2 * c) % 3 != 0);
    mask.set(0, 1, true);
    vec![
        ("matmul", vec![a(&[3, 4], 1), a(&[4, 5], 2)], Box::new(|t, v| { let y = t.matmul(v[0], v[1]).unwrap(); readout(t, y, 90) })),
        ("matmul_t(a^T b)", vec![a(&[4, 3], 3), a(&[4, 5], 4)], Box::new(|t, v| { let y = t.matmul_t(v[0], v[1], true, false).unwrap(); readout(t, y, 91) })),
        ("matmul_t(a b^T)", vec![a(&[3, 4], 5), a(&[5, 4], 6)], Box::new(|t, v| { let y = t.matmul_t(v[0], v[1], false, true).unwrap(); readout(t, y, 92) })),
        ("matmul_t(a^T b^T)", vec![a(&[4, 3], 7), a(&[5, 4], 8)], Box::new(|t, v| { let y = t.matmul_t(v[0], v[1], true, true).unwrap(); readout(t, y, 93) })),
        ("add", vec![a(&[3, 4], 9), a(&[3, 4], 10)], Box::new(|t, v| { let y = t.add(v[0], v[1]).unwrap(); readout(t, y, 94) })),
        ("add(broadcast row)", vec![a(&[3, 4], 11), a(&[4], 12)], Box::new(|t, v| { let y = t.add(v[0], v[1]).unwrap(); readout(t, y, 95) })),
        ("sub", vec![a(&[3, 4], 13), a(&[3, 4], 14)], Box::new(|t, v| { let y = t.sub(v[0], v[1]).unwrap(); readout(t, y, 96) })),
        ("mul", vec![a(&[3, 4], 15), a(&[3, 4], 16)], Box::new(|t, v| { let y = t.mul(v[0], v[1]).unwrap(); readout(t, y, 97) })),
        ("scale", vec![a(&[3, 4], 17)], Box::new(|t, v| { let y = t.scale(v[0], -1.7); readout(t, y, 98) })),
        ("gelu", vec![a(&[3, 4], 18)], Box::new(|t, v| { let y = t.gelu(v[0]); readout(t, y, 99) })),
        ("layer_norm", vec![a(&[3, 6], 19), a(&[6], 20), a(&[6], 21)], Box::new(|t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(); readout(t, y, 100) })),
        ("softmax", vec![a(&[3, 5], 22)], Box::new(|t, v| { let y = t.softmax(v[0]).unwrap(); readout(t, y, 101) })),
        ("masked_softmax", vec![a(&[4, 5], 23)], Box::new(move |t, v| { let y = t.masked_softmax(v[0], Some(&mask)).unwrap(); readout(t, y, 102) })),
        ("reshape", vec![a(&[3, 4], 24)], Box::new(|t, v| { let y = t.reshape(v[0], &[2, 6]).unwrap(); readout(t, y, 103) })),
        ("permute", vec![a(&[2, 3, 4], 25)], Box::new(|t, v| { let y = t.permute(v[0], &[2, 0, 1]).unwrap(); readout(t, y, 104) })),
        ("concat_rows", vec![a(&[2, 3], 26), a(&[4, 3], 27)], Box::new(|t, v| { let y = t.concat_rows(&[v[0], v[1], v[0]]).unwrap(); readout(t, y, 105) })),
        ("slice_rows", vec![a(&[5, 3], 28)], Box::new(|t, v| { let y = t.slice_rows(v[0], 1, 3).unwrap(); readout(t, y, 106) })),
        ("gather_rows", vec![a(&[4, 3], 29)], Box::new(|t, v| { let y = t.gather_rows(v[0], &[3, 0, 3, 2, 3]).unwrap(); readout(t, y, 107) })),
        ("cross_entropy", vec![a(&[4, 6], 30)], Box::new(|t, v| t.cross_entropy(v[0], &[5, 0, 2, 2]).unwrap())),
        ("sum", vec![a(&[3, 4], 31)], Box::new(|t, v| { let y = t.gelu(v[0]); t.sum(y) })),
        ("mean", vec![a(&[3, 4], 32)], Box::new(|t, v| { let y = t.gelu(v[0]); t.mean(y) })),
    ]
}

fn tiny_config(repr: Representation, variant: EncoderVariant) -> RunConfig {
    let mut c: RunConfig = serde_json::from_str(
        r#"{"k": 6, "layers": 1, "heads": 2, "d_enc": 16, "d_llm": 32, "policy_blocks": 1, "policy_heads": 2,
            "timesteps": 3, "horizon": 4, "history_len": 2, "image_height": 16, "image_width": 32,
            "x_bins": 8, "y_bins": 8}"#,
    )
    .unwrap();
    c.repr = repr;
    c.variant = variant;
    c
}

fn c2_gradients(_: &mut Shared) -> Outcome {
    let mut lines = Vec::new();
    let mut worst_all = 0.0f32;
    for (name, inputs, f) in op_cases() {
        let w = fd_inputs(&inputs, &*f);
        ensure(w < 1e-2, || format!("{name}: rel err {w:.3e}"))?;
        worst_all = worst_all.max(w);
        lines.push(name);
    }
    let mut composed = Vec::new();
    let models = EncoderVariant::ALL
        .into_iter()
        .map(|v| (Representation::Flex, v))
        .chain([(Representation::Baseline, EncoderVariant::JointSelf)]);
    for (repr, variant) in models {
        let cfg = tiny_config(repr, variant);
        let mut store = ParamStore::new(3);
        let model = FlexModel::new(&mut store, cfg.model().map_err(err)?).map_err(err)?;
        let clip = generate_clip_with_id(0, 5, &cfg.world()).map_err(err)?;
        let (w, n) = fd_params(&store, 3, &|t: &mut Tape| model.loss(t, &clip).unwrap());
        let label = if repr == Representation::Baseline { "baseline".to_string() } else { variant.name().to_string() };
        ensure(w < 1e-2, || format!("composed {label}: rel err {w:.3e}"))?;
        worst_all = worst_all.max(w);
        composed.push(format!("{label}({n})"));
    }
    Ok(format!("{} ops and composed models [{}], worst rel err {worst_all:.2e} (< 1e-2)", lines.len(), composed.join(" ")))
}

// ---------------------------------------------------------------------------
// 3. Scene encoder shape and cross-image sensitivity.

fn grids(tape: &mut Tape, cams: usize, steps: usize, n: (usize, usize), d: usize, seed: u64) -> Vec<TokenGrid> {
    let mut out = Vec::new();
    for t in 0..steps {
        for c in 0..cams {
            let tokens = tape.constant(random_array(&[n.0 * n.1, d], seed + (t * cams + c) as u64));
            out.push(TokenGrid { tokens, rows: n.0, cols: n.1, camera_id: c as u32, timestep_index: t });
        }
    }
    out
}

fn c3_encoder(_: &mut Shared) -> Outcome {
    let d = 8;
    let mut shapes = 0;
    for variant in EncoderVariant::ALL {
        for cams in [2, 4, 7] {
            let k = 2 * cams * 9;
            let mut store = ParamStore::new(5);
            let enc = SceneEncoder::new(&mut store, "encoder", EncoderConfig { k, layers: 2, heads: 2, d_enc: d, variant })
                .map_err(err)?;
            let mut tape = Tape::no_grad(&store);
            for n in [(1, 1), (2, 3), (4, 8)] {
                let gs = grids(&mut tape, cams, 9, n, d, 1);
                let s = enc.encode(&mut tape, &gs).map_err(err)?;
                ensure(tape.shape(s.values) == [k, d], || format!("{variant:?} C={cams} N'={n:?}: {:?}", tape.shape(s.values)))?;
                shapes += 1;
            }
            // Perturb each image in turn and see which output rows move.
            let base = grids(&mut tape, cams, 9, (2, 2), d, 40);
            let s0 = enc.encode(&mut tape, &base).map_err(err)?;
            let s0 = tape.data(s0.values).to_vec();
            let per = k / base.len();
            for i in 0..base.len() {
                let mut gs = base.clone();
                let noise = tape.constant(random_array(&[4, d], 900 + i as u64));
                gs[i].tokens = tape.add(gs[i].tokens, noise).map_err(err)?;
                let s = enc.encode(&mut tape, &gs).map_err(err)?;
                let moved: Vec<f32> = tape
                    .data(s.values)
                    .chunks(d)
                    .zip(s0.chunks(d))
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max))
                    .collect();
                if variant.per_image() {
                    let leaked = moved.iter().enumerate().filter(|&(r, &m)| r / per != i && m != 0.0).count();
                    ensure(leaked == 0, || format!("{variant:?} C={cams}: image {i} moved {leaked} rows of other images"))?;
                } else {
                    ensure(moved.iter().any(|&m| m > 0.0), || format!("{variant:?} C={cams}: image {i} has no effect"))?;
                }
            }
        }
    }
    Ok(format!("{shapes} encodes give K rows; per-image variants exactly local, joint variants see every image"))
}

// ---------------------------------------------------------------------------
// 4. Interleaving beats non-interleaving and constant velocity.

fn c4_interleave(shared: &mut Shared) -> Outcome {
    let base = Shared::base();
    let mut rows = Vec::new();
    let (mut inter_sum, mut non_sum, mut cv_sum) = (0.0, 0.0, 0.0);
    for seed in TRAIN_SEEDS {
        let inter = shared.trained(seed, true)?;
        let non = shared.trained(seed, false)?;
        let cfg = RunConfig { seed, ..base.clone() };
        let test = shared.data()?.split(Split::Test);
        let (ri, _) = evaluate(&RunConfig { interleave: true, ..cfg.clone() }, &inter.model, &inter.store, &test).map_err(err)?;
        let (rn, _) = evaluate(&RunConfig { interleave: false, ..cfg }, &non.model, &non.store, &test).map_err(err)?;
        let cv = ri.constant_velocity_minade;
        inter_sum += ri.minade6;
        non_sum += rn.minade6;
        cv_sum += cv;
        rows.push(format!("seed {seed}: {:.3} / {:.3}", ri.minade6, rn.minade6));
    }
    let n = TRAIN_SEEDS.len() as f64;
    let (inter, non, cv) = (inter_sum / n, non_sum / n, cv_sum / n);
    let detail = format!(
        "{} test clips; mean interleaved {inter:.3} non-interleaved {non:.3} cv {cv:.3} ({})",
        shared.data()?.split(Split::Test).len(),
        rows.join("; ")
    );
    if inter < non && inter < cv {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 5. Throughput ordering.

fn bench(cfg: &RunConfig, clips: &[&Clip]) -> Result<BenchReport, String> {
    let (model, store, _) = checkpoint::init(cfg).map_err(err)?;
    throughput(&model, &store, clips, 1, 4, 3).map_err(err)
}

fn c5_throughput(_: &mut Shared) -> Outcome {
    let base = RunConfig::default();
    let clips: Vec<Clip> = (0..4).map(|i| generate_clip_with_id(i, 100 + i, &base.world()).unwrap()).collect();
    let refs: Vec<&Clip> = clips.iter().collect();
    let flex = bench(&base, &refs)?;
    let baseline = bench(&RunConfig { repr: Representation::Baseline, ..base.clone() }, &refs)?;
    ensure(flex.mean_clips_per_sec > baseline.mean_clips_per_sec, || {
        format!("flex K=90 {:.2} clips/s <= baseline {:.2}", flex.mean_clips_per_sec, baseline.mean_clips_per_sec)
    })?;
    let mut curve = Vec::new();
    for k in [18, 45, 90, 180, 450, 900] {
        let b = bench(&RunConfig { k, ..base.clone() }, &refs)?;
        curve.push((k, b.mean_clips_per_sec));
    }
    for w in curve.windows(2) {
        ensure(w[1].1 <= 1.05 * w[0].1, || format!("K={} at {:.2} clips/s exceeds K={} at {:.2} by > 5%", w[1].0, w[1].1, w[0].0, w[0].1))?;
    }
    let curve: Vec<String> = curve.iter().map(|(k, t)| format!("K{k}:{t:.2}")).collect();
    Ok(format!(
        "flex K=90 {:.2} vs baseline ({} tokens) {:.2} clips/s; {}",
        flex.mean_clips_per_sec,
        baseline.policy_tokens,
        baseline.mean_clips_per_sec,
        curve.join(" ")
    ))
}

// ---------------------------------------------------------------------------
// 6. minADE against a loop oracle.

fn c6_minade(_: &mut Shared) -> Outcome {
    let mut r = rng::stream(6, "acceptance-minade");
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let gt: Vec<[f32; 2]> = (0..10).map(|_| [r.gen_range(-5.0..40.0), r.gen_range(-10.0..10.0)]).collect();
        let preds: Vec<Vec<[f32; 2]>> =
            (0..6).map(|_| (0..10).map(|_| [r.gen_range(-5.0..40.0), r.gen_range(-10.0..10.0)]).collect()).collect();
        for steps in [1, 2, 6, 10] {
            let mut best = f64::INFINITY;
            for p in &preds {
                let mut total = 0.0;
                for j in 0..steps {
                    let dx = p[j][0] as f64 - gt[j][0] as f64;
                    let dy = p[j][1] as f64 - gt[j][1] as f64;
                    total += (dx * dx + dy * dy).sqrt();
                }
                best = best.min(total / steps as f64);
            }
            worst = worst.max((min_ade(&preds, &gt, steps).map_err(err)? - best).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation from loop oracle {worst:.3e}"))?;
    let gt: Vec<[f32; 2]> = (0..10).map(|i| [i as f32 * 1.5, -(i as f32) * 0.25]).collect();
    let shifted: Vec<Vec<[f32; 2]>> = vec![gt.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect(); 6];
    let five = min_ade(&shifted, &gt, 10).map_err(err)?;
    ensure(five == 5.0, || format!("(3,4) offset gives {five}, not exactly 5.0"))?;
    Ok(format!("1000 instances x 4 horizons within {worst:.1e} of the loop oracle; (3,4) offset gives exactly 5.0"))
}

// ---------------------------------------------------------------------------
// 7. Tokenizer round trip.

fn c7_tokenizer(_: &mut Shared) -> Outcome {
    let vocab = WaypointVocab::default();
    let (bx, by) = vocab.bin_width();
    let mut r = rng::stream(7, "acceptance-tokenizer");
    let mut worst = (0.0f32, 0.0f32);
    for _ in 0..10_000 {
        let p = [r.gen_range(-5.0f32..40.0), r.gen_range(-10.0f32..10.0)];
        let back = vocab.waypoint(vocab.token(p)).map_err(err)?;
        let (ex, ey) = ((back[0] - p[0]).abs(), (back[1] - p[1]).abs());
        ensure(ex <= bx / 2.0 + 1e-5 && ey <= by / 2.0 + 1e-5, || format!("{p:?} -> {back:?} exceeds half a bin"))?;
        worst = (worst.0.max(ex), worst.1.max(ey));
    }
    Ok(format!("10^4 points, worst error ({:.4}, {:.4}) m within half-bin ({:.4}, {:.4}) m", worst.0, worst.1, bx / 2.0, by / 2.0))
}

// ---------------------------------------------------------------------------
// 8. Attention-response analysis.

fn marker_clips(base: &RunConfig, n: u64) -> Result<Vec<Clip>, String> {
    let world = WorldConfig { scenario: Some(Scenario::MarkerProbe), frame_stride: base.eval_stride, ..base.world() };
    (0..n).map(|i| generate_clip_with_id(1_000_000 + i, 7_000_000 + i, &world).map_err(err)).collect()
}

fn localization_rate(model: &FlexModel, store: &ParamStore, clips: &[Clip], patch: usize) -> Result<usize, String> {
    let mut hits = 0;
    for c in clips {
        let rec = model.attention_record(store, c).map_err(err)?;
        if localizes_marker(&token_responses(&rec).map_err(err)?, c, patch) {
            hits += 1;
        }
    }
    Ok(hits)
}

fn c8_attention(shared: &mut Shared) -> Outcome {
    let base = Shared::base();
    let trained = shared.trained(TRAIN_SEEDS[0], true)?;
    let (model, store) = (&trained.model, &trained.store);
    let encoder = model.encoder().ok_or("trained model has no encoder")?;
    let test = shared.data()?.split(Split::Test);

    // Loop oracle over the full attention matrix, and recording neutrality.
    let mut worst = 0.0f64;
    let mut per_clip = Vec::new();
    for clip in test.iter().take(20) {
        let mut tape = Tape::no_grad(store);
        let gs = model.grids(&mut tape, clip).map_err(err)?;
        let plain = encoder.encode(&mut tape, &gs).map_err(err)?;
        let plain = tape.data(plain.values).to_vec();
        let full = encoder.encode_recorded(&mut tape, &gs).map_err(err)?;
        let probs = *full.probs.last().ok_or("no attention recorded")?;
        let (scene, rec) = encoder.attention_record(&mut tape, &gs).map_err(err)?;
        let same = tape.data(scene.values).iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("clip {}: recording changed the encoder output", clip.id))?;
        let responses = token_responses(&rec).map_err(err)?;
        let (k, m) = (rec.k, rec.keys());
        let kk = k + m;
        let p = tape.data(probs);
        for (q, r) in responses.iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            for key in 0..m {
                let mut s = 0.0;
                for h in 0..rec.heads {
                    s += p[(h * kk + q) * kk + k + key] as f64;
                }
                best = best.max(s / rec.heads as f64);
            }
            worst = worst.max((r.max_response - best).abs());
        }
        per_clip.push(responses);
    }
    ensure(worst <= 1e-9, || format!("max response deviates from loop oracle by {worst:.3e}"))?;
    let curve = sorted_response_curve(&per_clip).map_err(err)?;
    ensure(curve.windows(2).all(|w| w[0] >= w[1]), || "response curve increases".into())?;

    // Marker localization on held-out probe clips.
    let probes = marker_clips(&base, 50)?;
    let hits = localization_rate(model, store, &probes, base.patch_size)?;
    let (m0, s0, _) = checkpoint::init(&base).map_err(err)?;
    let untrained = localization_rate(&m0, &s0, &probes, base.patch_size)?;
    let detail = format!(
        "oracle dev {worst:.1e}, curve non-increasing over {} clips, recording bit-neutral; marker localized in {hits}/50 (untrained {untrained}/50)",
        per_clip.len()
    );
    ensure(hits * 100 >= 60 * probes.len(), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 9 and 10 drive the command-line binary.

fn flex_cli(args: &[&str]) -> Result<Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_flex")).args(args).env("RUST_LOG", "warn").output().map_err(err)?;
    ensure(out.status.success(), || format!("flex {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))?;
    Ok(out)
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn metrics(dir: &Path) -> Result<Vec<StepRecord>, String> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .map_err(err)?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(err))
        .collect()
}

fn c9_reproducibility(_: &mut Shared) -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();
    let cfg = RunConfig { stage1_steps: 4, stage2_steps: 2, warmup: 2, batch_size: 4, checkpoint_every: 3, clips: 24, ..RunConfig::default() };
    let cfg_path = root.join("run.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).map_err(err)?).map_err(err)?;
    let data = root.join("data.flexdata");
    flex_cli(&["gen-data", "--config", &s(&cfg_path), "--out-dir", &s(&root.join("gen")), "--out", &s(&data)])?;

    let a = root.join("a");
    flex_cli(&["train", "--config", &s(&cfg_path), "--data", &s(&data), "--out-dir", &s(&a)])?;
    // The second run is configured from the first run's manifest alone.
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).map_err(err)?).map_err(err)?;
    let replay = root.join("replay.json");
    std::fs::write(&replay, manifest["config"].to_string()).map_err(err)?;
    let b = root.join("b");
    flex_cli(&["train", "--config", &s(&replay), "--data", &s(&data), "--out-dir", &s(&b)])?;
    let mb: serde_json::Value = serde_json::from_slice(&std::fs::read(b.join("manifest.json")).map_err(err)?).map_err(err)?;
    ensure(manifest["config_sha256"] == mb["config_sha256"], || "manifests disagree".into())?;
    let (la, lb) = (metrics(&a)?, metrics(&b)?);
    for i in 0..2 {
        ensure(la[i].loss.to_bits() == lb[i].loss.to_bits(), || format!("step {i}: {} vs {}", la[i].loss, lb[i].loss))?;
    }

    let r = root.join("resumed");
    flex_cli(&["train", "--config", &s(&cfg_path), "--data", &s(&data), "--resume", &s(&a.join("ckpt/step3.ckpt")), "--out-dir", &s(&r)])?;
    let lr = metrics(&r)?;
    ensure(lr.first().map(|x| x.step) == Some(3), || "resumed run does not start at step 3".into())?;
    ensure(lr.len() == la.len() - 3, || format!("resumed run logged {} steps", lr.len()))?;
    for (x, y) in lr.iter().zip(&la[3..]) {
        ensure(x.step == y.step && x.loss.to_bits() == y.loss.to_bits(), || format!("step {}: resumed {} vs {}", x.step, x.loss, y.loss))?;
    }
    Ok(format!(
        "steps 0-1 bit-identical ({:.6}, {:.6}); resume from step 3 reproduces steps 3-5 bit-exactly",
        la[0].loss, la[1].loss
    ))
}

/// Small budget for the sweeps: stage 1 only, a short schedule and a few
/// evaluation clips per point.
const ABLATE: &str = r#"{
  "k": 18, "layers": 2, "d_enc": 32, "d_llm": 64, "policy_blocks": 2,
  "stage1_steps": 30, "stage2_steps": 0, "warmup": 5, "batch_size": 8, "lr_stage1": 1e-3,
  "clips": 120, "eval_clips": 6, "bench_warmup": 1, "bench_iters": 2, "bench_reps": 3
}"#;

fn sweep_rows(out: &Path) -> Result<Vec<Vec<String>>, String> {
    let csv = std::fs::read_to_string(out.join("sweep.csv")).map_err(err)?;
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or("empty sweep.csv")?.split(',').collect();
    ensure(header[1] == "value" && header[10] == "minade6" && header[16] == "clips_per_sec", || format!("header {header:?}"))?;
    Ok(lines.map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn c10_ablation(_: &mut Shared) -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();
    let cfg_path = root.join("ablate.json");
    std::fs::write(&cfg_path, ABLATE).map_err(err)?;
    let data = root.join("data.flexdata");
    flex_cli(&["gen-data", "--config", &s(&cfg_path), "--out-dir", &s(&root.join("gen")), "--out", &s(&data)])?;
    let mut summary = Vec::new();
    for (axis, expected) in [
        ("attention", ["per_image_cross", "per_image_self", "joint_cross", "joint_self"]),
        ("interleave", ["baseline_non_interleave", "baseline_interleave", "flex_non_interleave", "flex_interleave"]),
    ] {
        let out = root.join(axis);
        flex_cli(&["ablate", "--config", &s(&cfg_path), "--data", &s(&data), "--axis", axis, "--out-dir", &s(&out)])?;
        let rows = sweep_rows(&out)?;
        let values: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
        ensure(values == expected, || format!("{axis}: rows {values:?}"))?;
        for r in &rows {
            let minade: f64 = r[10].parse().map_err(err)?;
            let tput: f64 = r[16].parse().map_err(err)?;
            ensure(r[18] == "ok" && minade.is_finite() && tput > 0.0, || format!("{axis} {}: status {} minade {minade} clips/s {tput}", r[1], r[18]))?;
        }
        summary.push(format!(
            "{axis}: {}",
            rows.iter().map(|r| format!("{}={:.2}m/{:.1}cps", r[1], r[10].parse::<f64>().unwrap(), r[16].parse::<f64>().unwrap())).collect::<Vec<_>>().join(" ")
        ));
    }
    Ok(summary.join("; "))
}

// ---------------------------------------------------------------------------

/// Id, name, runtime limit in seconds, check.
type Criterion = (u32, &'static str, f64, fn(&mut Shared) -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "packed interleaved forward equals split prefixes", 30.0, c1_packing),
    (2, "finite-difference gradients", 120.0, c2_gradients),
    (3, "scene encoder rows and image sensitivity", 60.0, c3_encoder),
    (4, "interleaving beats non-interleaving and constant velocity", 7200.0, c4_interleave),
    (5, "throughput ordering", 600.0, c5_throughput),
    (6, "minADE loop oracle", 10.0, c6_minade),
    (7, "tokenizer round trip", 5.0, c7_tokenizer),
    (8, "attention responses and marker localization", 600.0, c8_attention),
    (9, "reproducible training and exact resume", 300.0, c9_reproducibility),
    (10, "attention and interleave ablations", 10800.0, c10_ablation),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, limit, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let outcome = run(&mut shared);
        let secs = t0.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(detail) if secs > limit => Err(format!("took {secs:.1} s, limit {limit} s; {detail}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name} ({secs:.1} s of {limit} s): {detail}"),
            Err(detail) => {
                println!("criterion {id:>2} FAIL  {name} ({secs:.1} s of {limit} s): {detail}");
                failed.push(id);
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
