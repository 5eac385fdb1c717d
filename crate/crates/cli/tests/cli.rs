use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use clap::Parser;
use serde_json::Value;
use tempfile::TempDir;
use wfno_cli::config::RunConfig;
use wfno_cli::{effective_config, Cli};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_wfno"));
    c.env_remove("WFNO_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/desk")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.model.channels = 4;
    cfg.model.wfno_layers = 1;
    cfg.model.attn_layers = 1;
    cfg.model.modes_h = 8;
    cfg.model.modes_w = 8;
    cfg.train.steps = 8;
    cfg.sampler.steps = 4;
    cfg.ats_fit.n_coarse = 3;
    cfg.ats_fit.n_fine = 12;
    cfg.ats_fit.iterations = 2;
    cfg.ats_fit.patches = 1;
    cfg.paths.output_dir = dir.join("out");
    let p = dir.join("tiny.json");
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
    lr: PathBuf,
}

impl Fixture {
    fn ckpt(&self) -> PathBuf {
        self.dir.path().join("run/best.ckpt")
    }
}

/// One tiny training run and a 16×16 low-resolution input, shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        let run_dir = dir.path().join("run");
        let out = run(&["--config", s(&config), "train", "--data", s(&data_dir()), "--run-dir", s(&run_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let lr_dir = dir.path().join("lr");
        let out = run(&["--scale", "2", "degrade", "--input", s(&data_dir()), "--output", s(&lr_dir)]);
        assert!(out.status.success());
        Fixture {
            lr: lr_dir.join("desk_05_x2.png"),
            dir,
            config,
        }
    })
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn degrade_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    fs::create_dir(&input).unwrap();
    for n in ["desk_00.png", "desk_01.png"] {
        fs::copy(data_dir().join(n), input.join(n)).unwrap();
    }
    let a = dir.path().join("a");
    let out = run(&["--scale", "2", "degrade", "--input", s(&input), "--output", s(&a)]);
    assert!(out.status.success());
    let img = wfno_core::tensor::load_image(a.join("desk_00_x2.png")).unwrap();
    assert_eq!((img.height(), img.width()), (16, 16));
    let manifest = fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    assert_eq!(manifest.lines().next().unwrap(), wfno_cli::commands::MANIFEST_HEADER);

    let b = dir.path().join("b");
    assert!(run(&["--scale", "2", "degrade", "--input", s(&input), "--output", s(&b)]).status.success());
    for n in ["desk_00_x2.png", "desk_01_x2.png"] {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap());
    }
}

#[test]
fn train_smoke_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let run_dir = dir.path().join("run");
    let clock = Instant::now();
    let out = run(&["--config", s(&config), "--steps", "10", "train", "--data", s(&data_dir()), "--run-dir", s(&run_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(clock.elapsed().as_secs_f64() < 60.0);
    for f in ["best.ckpt", "last.ckpt", "last.ckpt.optim", "loss.csv", "config.json", "train_report.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let out = run(&[
        "--config", s(&config), "--steps", "14", "train", "--data", s(&data_dir()), "--run-dir", s(&run_dir), "--resume",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    let steps: Vec<u64> = log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (1..=14).collect::<Vec<_>>());
    let report = json(&run_dir.join("train_report.json"));
    assert_eq!(report["start_step"], 10);
    assert_eq!(report["steps"], 14);
}

#[test]
fn sample_fractional_scale_and_report() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out_png = dir.path().join("sr.png");
    let out = run(&[
        "--config", s(&f.config), "--scale", "2.5", "--steps", "5", "sample", s(&f.lr), "--checkpoint", s(&f.ckpt()),
        "--output", s(&out_png),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = wfno_core::tensor::load_image(&out_png).unwrap();
    assert_eq!((img.height(), img.width()), (40, 40));
    let rep = json(&out_png.with_extension("json"));
    for k in ["steps", "mode", "wall_ms", "nfe", "grid"] {
        assert!(rep.get(k).is_some(), "{k}");
    }
    assert_eq!(rep["nfe"], 20);
    assert_eq!(rep["mode"], "rk4-grid");
    assert_eq!(rep["grid"].as_array().unwrap().len(), 6);
}

#[test]
fn sample_is_bitwise_reproducible() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let go = |name: &str, seed: &str| {
        let p = dir.path().join(name);
        let out = run(&[
            "--config", s(&f.config), "--seed", seed, "sample", s(&f.lr), "--checkpoint", s(&f.ckpt()), "--output", s(&p),
        ]);
        assert!(out.status.success());
        fs::read(p).unwrap()
    };
    let a = go("a.png", "3");
    assert_eq!(a, go("b.png", "3"));
    assert_ne!(a, go("c.png", "4"));
}

#[test]
fn eval_of_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    let img = data_dir().join("desk_00.png");
    let report = dir.path().join("eval.json");
    let out = run(&["eval", s(&img), s(&img), "--report", s(&report)]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("99.00"), "{text}");
    let r = json(&report);
    assert_eq!(r["mean_ssim"], 1.0);
    assert!(r["mean_psnr"].is_null());
}

#[test]
fn eval_of_directories_with_csv() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let lr_dir = f.lr.parent().unwrap();
    let csv = dir.path().join("eval.csv");
    let out = run(&["--y-channel", "eval", s(lr_dir), s(lr_dir), "--csv", s(&csv), "--report", s(&dir.path().join("e.json"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // SSIM is undefined below the 11×11 window, PSNR is still reported
    assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 33);
    assert_eq!(json(&dir.path().join("e.json"))["y_channel"], true);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("g.json");
    let out = run(&["gradcheck", "--report", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let rows = json(&report);
    assert!(rows.as_array().unwrap().iter().all(|r| r["passed"] == true));
}

#[test]
fn bench_defaults_to_one_hundred_runs() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("bench.json");
    let tiny_lr = dir.path().join("lr8");
    assert!(run(&["--scale", "4", "degrade", "--input", s(&data_dir()), "--output", s(&tiny_lr)]).status.success());
    let out = run(&[
        "--config", s(&f.config), "--steps", "2", "bench", s(&tiny_lr.join("desk_00_x4.png")), "--checkpoint",
        s(&f.ckpt()), "--report", s(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&report);
    assert_eq!(r["runs"], 100);
    assert_eq!(r["nfe"], 8);
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    assert_eq!(run(&["sample", "--frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["dance"]).status.code(), Some(1));
    assert_eq!(run(&["--mode", "euler", "gradcheck"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"sampler": {"stepz": 3}}"#).unwrap();
    assert_eq!(run(&["--config", s(&bad), "gradcheck"]).status.code(), Some(1));
    let missing = dir.path().join("nope.ckpt");
    let img = data_dir().join("desk_00.png");
    let out = run(&["sample", s(&img), "--checkpoint", s(&missing), "--output", s(&dir.path().join("x.png"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    fs::write(&p, r#"{"seed": 5, "scale": 3.0, "sampler": {"steps": 7}, "train": {"steps": 11}}"#).unwrap();
    let cli = Cli::parse_from(["wfno", "--config", s(&p), "--scale", "2", "--steps", "9", "sample", "x.png"]);
    let cfg = effective_config(&cli).unwrap();
    assert_eq!((cfg.seed, cfg.scale, cfg.sampler.steps, cfg.train.steps), (5, 2.0, 9, 11));
    let cli = Cli::parse_from(["wfno", "--config", s(&p), "--steps", "9", "--seed", "1", "train"]);
    let cfg = effective_config(&cli).unwrap();
    assert_eq!((cfg.seed, cfg.sampler.steps, cfg.train.steps), (1, 7, 9));
    let cli = Cli::parse_from(["wfno", "--mode", "rk45", "--y-channel", "bench", "x.png", "--runs", "3"]);
    let cfg = effective_config(&cli).unwrap();
    assert_eq!(cfg.eval.runs, 3);
    assert!(cfg.eval.y_channel);
    assert_eq!(cfg.sampler.mode, wfno_core::sampler::SolverMode::Rk45);
}

#[test]
fn config_round_trips_through_text() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(&tiny_config(dir.path())).unwrap();
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}

#[test]
fn fitted_grid_is_used_by_sample() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    // a private copy so the sidecar does not leak into other tests
    let ckpt = dir.path().join("m.ckpt");
    fs::copy(f.ckpt(), &ckpt).unwrap();
    fs::copy(wfno_core::model::manifest_path(&f.ckpt()), wfno_core::model::manifest_path(&ckpt)).unwrap();
    let report = dir.path().join("fit.json");
    let out = run(&[
        "--config", s(&f.config), "ats-fit", "--checkpoint", s(&ckpt), "--data", s(&data_dir()), "--report", s(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit = json(&report);
    assert!(fit["final_objective"].as_f64().unwrap() <= fit["initial_objective"].as_f64().unwrap());
    let side = wfno_cli::commands::ats_sidecar(&ckpt);
    let omega = json(&side)["omega"].clone();
    let png = dir.path().join("s.png");
    let out = run(&["--config", s(&f.config), "sample", s(&f.lr), "--checkpoint", s(&ckpt), "--output", s(&png)]);
    assert!(out.status.success());
    assert_eq!(json(&png.with_extension("json"))["omega"], omega);
}
