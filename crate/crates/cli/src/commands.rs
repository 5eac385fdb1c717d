//! Subcommand implementations. Each returns the JSON report it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wfno_core::dataset::{image_files, load_patches, split_indices};
use wfno_core::diffusion::{degrade, structured_noise};
use wfno_core::metrics::{bench, compare, psnr_text, MetricReport, Timing};
use wfno_core::model::{sidecar, ModelParams};
use wfno_core::sampler::{fit_ats, hr_extent, sample, AtsFitReport, AtsParams, AtsProblem, NetworkScore, ScoreModel};
use wfno_core::tensor::{bicubic_resize, load_image, save_image};
use wfno_core::train::{gradcheck, train, TrainPaths, TrainReport, TrainState};
use wfno_core::{Error, Result};

use crate::config::RunConfig;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(io_err(path, std::io::Error::from(std::io::ErrorKind::NotFound)))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| io_err(p, e)),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn scale_tag(scale: f64) -> String {
    format!("x{scale}")
}

/// Sidecar holding a fitted ATS grid next to a checkpoint.
pub fn ats_sidecar(checkpoint: &Path) -> PathBuf {
    sidecar(checkpoint, "ats.json")
}

/// ATS weights used for sampling: the config override, else the sidecar,
/// else the checkpoint's own.
pub fn resolve_ats(cfg: &RunConfig, checkpoint: &Path, model: &ModelParams) -> Result<AtsParams> {
    if let Some(omega) = &cfg.sampler.omega {
        return AtsParams::new(omega.clone(), model.schedule.horizon);
    }
    let side = ats_sidecar(checkpoint);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| io_err(&side, e))?;
        let ats: AtsParams = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: side.clone(),
            reason: e.to_string(),
        })?;
        ats.validate()?;
        return Ok(ats);
    }
    Ok(model.ats.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeRow {
    pub hr: String,
    pub lr: String,
    pub scale: f64,
    pub hr_height: usize,
    pub hr_width: usize,
    pub lr_height: usize,
    pub lr_width: usize,
}

pub const MANIFEST_HEADER: &str = "hr,lr,scale,hr_height,hr_width,lr_height,lr_width";

/// Bicubic-degrade every image in `input` into `output`, with a manifest CSV.
pub fn cmd_degrade(cfg: &RunConfig, input: &Path, output: &Path) -> Result<Vec<DegradeRow>> {
    require(input)?;
    let files = image_files(input)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset);
    }
    fs::create_dir_all(output).map_err(|e| io_err(output, e))?;
    let mut rows = Vec::with_capacity(files.len());
    let mut csv = String::from(MANIFEST_HEADER);
    csv.push('\n');
    for f in &files {
        let hr = load_image(f)?.to_rgb();
        let lr = degrade(&hr, cfg.scale)?;
        let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let lr_name = format!("{name}_{}.png", scale_tag(cfg.scale));
        save_image(&lr, output.join(&lr_name))?;
        let row = DegradeRow {
            hr: f.display().to_string(),
            lr: lr_name,
            scale: cfg.scale,
            hr_height: hr.height(),
            hr_width: hr.width(),
            lr_height: lr.height(),
            lr_width: lr.width(),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.hr, row.lr, row.scale, row.hr_height, row.hr_width, row.lr_height, row.lr_width
        ));
        rows.push(row);
    }
    let mp = output.join("manifest.csv");
    fs::write(&mp, csv).map_err(|e| io_err(&mp, e))?;
    Ok(rows)
}

/// Train from `cfg.paths.data_dir` into `run_dir`, resuming from its last
/// checkpoint when asked.
pub fn cmd_train(cfg: &RunConfig, data: &Path, run_dir: &Path, resume: bool) -> Result<TrainReport> {
    require(data)?;
    let patches = load_patches(data)?;
    let paths = TrainPaths::new(run_dir);
    let state = if resume {
        require(&paths.last())?;
        TrainState::load(&paths)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        TrainState::fresh(ModelParams::init(cfg.model.clone(), cfg.schedule, &mut rng)?)
    };
    fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    let cp = run_dir.join("config.json");
    fs::write(&cp, cfg.to_json() + "\n").map_err(|e| io_err(&cp, e))?;
    let (_, report) = train(state, &patches, &cfg.train, cfg.seed, Some(&paths))?;
    write_json(&run_dir.join("train_report.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub input: String,
    pub output: String,
    pub scale: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub omega: Vec<f64>,
    #[serde(flatten)]
    pub report: wfno_core::sampler::SampleReport,
}

/// Super-resolve one image and write the PNG and its JSON report.
pub fn cmd_sample(cfg: &RunConfig, input: &Path, checkpoint: &Path, output: &Path, report: &Path) -> Result<SampleOutput> {
    require(input)?;
    require(checkpoint)?;
    let (model, _) = ModelParams::load(checkpoint)?;
    let ats = resolve_ats(cfg, checkpoint, &model)?;
    let lr = load_image(input)?;
    let (img, rep) = sample(&model, &lr, cfg.scale, &ats, &cfg.sampler.options(), cfg.seed)?;
    ensure_parent(output)?;
    save_image(&img, output)?;
    let out = SampleOutput {
        input: input.display().to_string(),
        output: output.display().to_string(),
        scale: cfg.scale,
        seed: cfg.seed,
        height: img.height(),
        width: img.width(),
        omega: ats.omega,
        report: rep,
    };
    write_json(report, &out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub y_channel: bool,
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: Option<f64>,
}

fn pairs(output: &Path, reference: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if output.is_dir() != reference.is_dir() {
        return Err(Error::InvalidArgument(
            "eval needs two files or two directories".into(),
        ));
    }
    if !output.is_dir() {
        let name = output.file_name().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        return Ok(vec![(name, output.to_path_buf(), reference.to_path_buf())]);
    }
    let mut out = Vec::new();
    for f in image_files(reference)? {
        let name = f.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let o = output.join(&name);
        require(&o)?;
        out.push((name, o, f));
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// PSNR/SSIM of outputs against references (files, or directories matched by name).
pub fn cmd_eval(cfg: &RunConfig, output: &Path, reference: &Path, csv: Option<&Path>) -> Result<EvalSummary> {
    require(output)?;
    require(reference)?;
    let mut rows = Vec::new();
    for (name, o, r) in pairs(output, reference)? {
        let a = load_image(&o)?.to_rgb();
        let b = load_image(&r)?.to_rgb();
        rows.push(EvalRow {
            name,
            metrics: compare(&a, &b, cfg.eval.y_channel)?,
        });
    }
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.metrics.psnr).sum::<f64>() / n;
    let ssims: Vec<f64> = rows.iter().filter_map(|r| r.metrics.ssim).collect();
    let mean_ssim = (ssims.len() == rows.len()).then(|| ssims.iter().sum::<f64>() / n);
    if let Some(path) = csv {
        ensure_parent(path)?;
        let mut text = String::from("name,psnr,ssim\n");
        for r in &rows {
            text.push_str(&format!(
                "{},{},{}\n",
                r.name,
                r.metrics.psnr,
                r.metrics.ssim.map(|s| s.to_string()).unwrap_or_default()
            ));
        }
        fs::write(path, text).map_err(|e| io_err(path, e))?;
    }
    Ok(EvalSummary {
        y_channel: cfg.eval.y_channel,
        rows,
        mean_psnr,
        mean_ssim,
    })
}

pub fn eval_table(s: &EvalSummary) -> String {
    let mut out = format!("{:<32} {:>8} {:>8}\n", "image", "PSNR", "SSIM");
    let ssim = |v: Option<f64>| v.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into());
    for r in &s.rows {
        out.push_str(&format!("{:<32} {:>8} {:>8}\n", r.name, psnr_text(r.metrics.psnr), ssim(r.metrics.ssim)));
    }
    out.push_str(&format!("{:<32} {:>8} {:>8}\n", "mean", psnr_text(s.mean_psnr), ssim(s.mean_ssim)));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub input: String,
    pub scale: f64,
    pub steps: usize,
    pub mode: wfno_core::sampler::SolverMode,
    #[serde(flatten)]
    pub timing: Timing,
}

/// Time repeated sampling of one input (one untimed warm-up run).
pub fn cmd_bench(cfg: &RunConfig, input: &Path, checkpoint: &Path) -> Result<BenchOutput> {
    require(input)?;
    require(checkpoint)?;
    let (model, _) = ModelParams::load(checkpoint)?;
    let ats = resolve_ats(cfg, checkpoint, &model)?;
    let lr = load_image(input)?;
    let opts = cfg.sampler.options();
    let timing = bench(cfg.eval.runs, || {
        sample(&model, &lr, cfg.scale, &ats, &opts, cfg.seed).map(|(_, r)| r.nfe)
    })?;
    Ok(BenchOutput {
        input: input.display().to_string(),
        scale: cfg.scale,
        steps: opts.steps,
        mode: opts.mode,
        timing,
    })
}

/// Every layer gradient check on `seeds` consecutive seeds from `cfg.seed`.
pub fn cmd_gradcheck(cfg: &RunConfig, seeds: u64) -> Result<Vec<gradcheck::GradcheckResult>> {
    let s: Vec<u64> = (0..seeds).map(|k| cfg.seed.wrapping_add(k)).collect();
    gradcheck::run_suite(&s)
}

pub fn gradcheck_table(rows: &[gradcheck::GradcheckResult]) -> String {
    let mut out = format!("{:<20} {:>5} {:>8} {:>12}  result\n", "layer", "seed", "coords", "max rel err");
    for r in rows {
        out.push_str(&format!(
            "{:<20} {:>5} {:>8} {:>12.3e}  {}\n",
            r.layer,
            r.seed,
            r.checked,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtsFitOutput {
    pub checkpoint: String,
    pub sidecar: String,
    pub problems: usize,
    #[serde(flatten)]
    pub report: AtsFitReport,
}

/// Fit the ATS weights on held-out patches and write them beside the checkpoint.
pub fn cmd_ats_fit(cfg: &RunConfig, checkpoint: &Path, data: &Path) -> Result<AtsFitOutput> {
    require(checkpoint)?;
    require(data)?;
    let (model, _) = ModelParams::load(checkpoint)?;
    let start = resolve_ats(cfg, checkpoint, &model)?;
    let patches = load_patches(data)?;
    let (_, val) = split_indices(patches.len(), cfg.train.val_fraction, cfg.seed);
    let chosen: Vec<usize> = if val.is_empty() { vec![0] } else { val };
    let mut problems = Vec::new();
    for (k, &i) in chosen.iter().take(cfg.ats_fit.patches).enumerate() {
        let hr = &patches[i];
        let lr = degrade(hr, cfg.scale)?.to_tensor();
        let (oh, ow) = (hr_extent(lr.shape()[1], cfg.scale), hr_extent(lr.shape()[2], cfg.scale));
        let score = NetworkScore::new(&model, lr.clone(), oh, ow)?;
        let mut x = bicubic_resize(&lr, oh, ow)?;
        if cfg.sampler.noise {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(k as u64));
            let eps = structured_noise(x.shape(), model.schedule.horizon, &model.schedule, score.op(), &mut rng)?;
            x = x.add(&eps)?;
        }
        problems.push(AtsProblem { score, x_start: x });
    }
    let (fitted, report) = fit_ats(&problems, &start, &cfg.ats_fit.options(cfg.sampler.drift))?;
    let side = ats_sidecar(checkpoint);
    write_json(&side, &fitted)?;
    Ok(AtsFitOutput {
        checkpoint: checkpoint.display().to_string(),
        sidecar: side.display().to_string(),
        problems: problems.len(),
        report,
    })
}

/// One-line JSON rendering for stdout.
pub fn compact<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("report serializes")
}

pub fn write_report<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_json(path, v)
}
