use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flex::checkpoint;
use flex::trainer::StepRecord;
use flex_core::patchify::PATCHIFIER_PREFIX;

const TINY: &str = r#"{
  "k": 6, "layers": 1, "heads": 2, "d_enc": 16, "d_llm": 32, "policy_blocks": 1, "policy_heads": 2,
  "timesteps": 3, "history_len": 2, "image_height": 16, "image_width": 32,
  "x_bins": 8, "y_bins": 8, "stage1_steps": 4, "stage2_steps": 2, "warmup": 2, "batch_size": 2,
  "clips": 40, "samples": 2, "bench_warmup": 1, "bench_iters": 2, "eval_clips": 3
}"#;

fn flex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flex")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout {}\nstderr {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

struct Setup {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
    data: String,
}

fn setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    let data = root.join("data.flexdata");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    ok(&flex(&["gen-data", "--config", &s(&config), "--out-dir", &s(&root.join("gen")), "--out", &s(&data)]));
    Setup { _dir: dir, root: root.clone(), config: s(&config), data: s(&data) }
}

fn path(p: PathBuf) -> String {
    p.to_str().unwrap().to_string()
}

fn metrics(dir: &Path) -> Vec<StepRecord> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_is_deterministic_and_validated() {
    let s = setup();
    let again = s.root.join("again.flexdata");
    ok(&flex(&["gen-data", "--config", &s.config, "--out-dir", &path(s.root.join("g2")), "--out", &path(again.clone())]));
    assert_eq!(std::fs::read(&s.data).unwrap(), std::fs::read(&again).unwrap());

    let seven = s.root.join("seven.flexdata");
    let out = flex(&["gen-data", "--config", &s.config, "--clips", "3", "--cameras", "7", "--out-dir", &path(s.root.join("g3")), "--out", &path(seven.clone())]);
    ok(&out);
    let ds = flex::dataset::read_dataset(&seven).unwrap();
    assert!(ds.clips.iter().all(|c| c.camera_ids.len() == 7));
    assert!(String::from_utf8_lossy(&out.stdout).contains("3 clips"));

    let none = s.root.join("none.flexdata");
    let out = flex(&["gen-data", "--clips", "0", "--out-dir", &path(s.root.join("g4")), "--out", &path(none.clone())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!none.exists());

    std::fs::write(s.root.join("blocker"), b"").unwrap();
    let out = flex(&["gen-data", "--config", &s.config, "--clips", "1", "--out-dir", &path(s.root.join("g5")), "--out", &path(s.root.join("blocker/x.flexdata"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flags_and_keys_are_config_errors() {
    assert_eq!(flex(&["gen-data", "--bogus"]).status.code(), Some(2));
    assert_eq!(flex(&["gen-data", "--set", "bogus=1"]).status.code(), Some(2));
    let help = String::from_utf8(flex(&["--help"]).stdout).unwrap();
    assert!(help.contains("clip_id,sample_idx,step,x,y"));
    assert!(help.contains("token_index,mean_max_response,rank"));
    let help = String::from_utf8(flex(&["ablate", "--help"]).stdout).unwrap();
    assert!(help.contains("minade6") && help.contains("clips_per_sec"));
}

#[test]
fn train_writes_manifest_metrics_and_checkpoints() {
    let s = setup();
    let run = s.root.join("run");
    ok(&flex(&["train", "--config", &s.config, "--data", &s.data, "--out-dir", &path(run.clone())]));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["k"], 6);
    assert_eq!(manifest["dataset_header_sha256"].as_str().unwrap().len(), 64);
    let log = metrics(&run);
    assert_eq!(log.len(), 6);
    assert_eq!(log.iter().map(|r| r.stage).collect::<Vec<_>>(), vec![1, 1, 1, 1, 2, 2]);
    assert!(log[4..].iter().all(|r| r.lr == 1e-5));

    let (stage1, _) = checkpoint::load(&run.join("ckpt/stage1.ckpt")).unwrap();
    let (fresh, ..) = {
        let (m, st, o) = checkpoint::init(&stage1.config).unwrap();
        (st, m, o)
    };
    for ((_, a), (_, b)) in fresh.iter().zip(stage1.store.iter()) {
        let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert_eq!(same, a.name.starts_with(PATCHIFIER_PREFIX), "{}", a.name);
    }
    let (stage2, _) = checkpoint::load(&run.join("ckpt/stage2.ckpt")).unwrap();
    assert_eq!(stage2.step, 6);
    let moved = fresh
        .iter()
        .zip(stage2.store.iter())
        .any(|((_, a), (_, b))| a.name.starts_with(PATCHIFIER_PREFIX) && a.value.data() != b.value.data());
    assert!(moved, "stage 2 should update the patchifier");
}

#[test]
fn identical_manifests_reproduce_and_resume_is_exact() {
    let s = setup();
    let (a, b, r) = (s.root.join("a"), s.root.join("b"), s.root.join("r"));
    let every = "checkpoint_every=3";
    ok(&flex(&["train", "--config", &s.config, "--set", every, "--data", &s.data, "--out-dir", &path(a.clone())]));
    ok(&flex(&["train", "--config", &s.config, "--set", every, "--data", &s.data, "--out-dir", &path(b.clone())]));
    let (la, lb) = (metrics(&a), metrics(&b));
    for i in 0..2 {
        assert_eq!(la[i].loss.to_bits(), lb[i].loss.to_bits());
    }
    ok(&flex(&[
        "train", "--config", &s.config, "--set", every, "--data", &s.data,
        "--resume", &path(a.join("ckpt/step3.ckpt")), "--out-dir", &path(r.clone()),
    ]));
    let lr = metrics(&r);
    assert_eq!(lr[0].step, 3);
    for (x, y) in lr.iter().zip(&la[3..]) {
        assert_eq!((x.step, x.loss.to_bits()), (y.step, y.loss.to_bits()));
    }
}

#[test]
fn eval_bench_and_analyze() {
    let s = setup();
    let ev = s.root.join("eval");
    ok(&flex(&["eval", "--config", &s.config, "--data", &s.data, "--out-dir", &path(ev.clone())]));
    let report: flex::eval::EvalReport = serde_json::from_slice(&std::fs::read(ev.join("report.json")).unwrap()).unwrap();
    let test = flex::dataset::read_dataset(Path::new(&s.data)).unwrap().split(flex_core::worldsim::Split::Test).len();
    let expected = test.min(3);
    assert!(expected > 0);
    assert_eq!(report.clips, expected);
    assert_eq!(report.buckets.len(), 4);
    assert!(report.minade6.is_finite() && report.minade6 > 0.0);
    let csv = std::fs::read_to_string(ev.join("samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + expected * 2 * 10);

    let out = flex(&["bench", "--config", &s.config, "--data", &s.data, "--out-dir", &path(s.root.join("bench"))]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("clips/s over 5 reps"));
    let bench: flex::eval::BenchReport = serde_json::from_slice(&std::fs::read(s.root.join("bench/bench.json")).unwrap()).unwrap();
    assert_eq!(bench.reps.len(), 5);

    let missing = s.root.join("nowhere");
    let out = flex(&["analyze", "--attn", &path(missing.clone()), "--out-dir", &path(s.root.join("an0"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(missing.to_str().unwrap()));

    let run = s.root.join("run");
    ok(&flex(&["train", "--config", &s.config, "--data", &s.data, "--out-dir", &path(run.clone())]));
    let an = s.root.join("an");
    ok(&flex(&[
        "analyze", "--config", &s.config, "--data", &s.data, "--checkpoint", &path(run.join("ckpt/stage2.ckpt")),
        "--clips", "2", "--top", "2", "--out-dir", &path(an.clone()),
    ]));
    let responses = std::fs::read_to_string(an.join("responses.csv")).unwrap();
    assert_eq!(responses.lines().count(), 1 + 6);
    let curve: Vec<f64> = std::fs::read_to_string(an.join("curve.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(curve.windows(2).all(|w| w[0] >= w[1]));
    let maps = std::fs::read_dir(an.join("maps")).unwrap().count();
    assert_eq!(maps, 2 * 2 * 3);
    assert_eq!(std::fs::read_dir(an.join("attn")).unwrap().count(), 2);
}

#[test]
fn ablate_tokens_grid() {
    let s = setup();
    let out = s.root.join("abl");
    ok(&flex(&["ablate", "--config", &s.config, "--data", &s.data, "--axis", "tokens", "--grid", "3,6,9,7", "--out-dir", &path(out.clone())]));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let ks: Vec<&str> = rows.iter().map(|r| r[5]).collect();
    assert_eq!(ks, vec!["3", "6", "9", "7"]);
    assert!(rows[..3].iter().all(|r| r[18] == "ok"));
    assert_eq!(rows[3][18], "error");
    assert!(std::fs::read_to_string(out.join("pareto.csv")).unwrap().starts_with("axis,value,minade6,clips_per_sec"));
}
