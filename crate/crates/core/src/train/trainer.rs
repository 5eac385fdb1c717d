//! The training loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{batch_loss, LossItem, TrainPair};
use super::optim::{adam_step, AdamConfig, OptimizerState};
use super::schedule::LrSchedule;
use crate::dataset::split_indices;
use crate::diffusion::lr_extent;
use crate::error::{Error, Result};
use crate::model::{sidecar, ModelParams, Progress};
use crate::tensor::{bicubic_resize, Image, Tensor};

pub const LOSS_CSV_HEADER: &str = "step,epoch,lr,train_loss,val_loss";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Total optimizer steps, counted across resumes.
    pub steps: u64,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: u64,
    pub val_fraction: f64,
    /// Side of the square high-resolution crops.
    pub patch: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Loss draws per validation patch.
    pub val_draws: usize,
    /// Fixed training draws used to report the loss before and after a run.
    pub probe_items: usize,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            steps: 2000,
            patience: 50,
            val_fraction: 0.1,
            patch: 16,
            scale_min: 1.0,
            scale_max: 4.0,
            val_draws: 4,
            probe_items: 32,
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patch == 0 || self.val_draws == 0 || self.probe_items == 0 {
            return Err(Error::Config(
                "batch_size, patch, val_draws and probe_items must be positive".into(),
            ));
        }
        if !(1.0 <= self.scale_min && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::Config("scales must satisfy 1 <= scale_min <= scale_max".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        self.lr.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub start_step: u64,
    pub steps: u64,
    pub epochs: u64,
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
    pub best_val: Option<f64>,
    pub stopped_early: bool,
    pub wall_s: f64,
}

/// Files written under a training output directory.
#[derive(Clone, Debug)]
pub struct TrainPaths {
    pub dir: PathBuf,
}

impl TrainPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        TrainPaths { dir: dir.into() }
    }

    /// Checkpoint with the best validation loss so far.
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    /// Most recent checkpoint, with its optimizer state beside it.
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn optimizer(&self) -> PathBuf {
        sidecar(&self.last(), "optim")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }
}

/// Everything a run continues from.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelParams,
    pub optimizer: OptimizerState,
    pub progress: Progress,
}

impl TrainState {
    pub fn fresh(model: ModelParams) -> Self {
        let n = model.net.num_scalars();
        TrainState {
            model,
            optimizer: OptimizerState::new(n),
            progress: Progress::default(),
        }
    }

    /// Resume from the last checkpoint under `paths`.
    pub fn load(paths: &TrainPaths) -> Result<Self> {
        let (model, progress) = ModelParams::load(paths.last())?;
        let optimizer = OptimizerState::load(paths.optimizer())?;
        if optimizer.len() != model.net.num_scalars() {
            return Err(Error::format(paths.optimizer(), "optimizer state does not match the model"));
        }
        Ok(TrainState {
            model,
            optimizer,
            progress,
        })
    }

    pub fn save(&self, paths: &TrainPaths) -> Result<()> {
        self.model.save(paths.last(), self.progress)?;
        self.optimizer.save(paths.optimizer())
    }
}

const STREAM_STEP: u64 = 1;
const STREAM_EPOCH: u64 = 2;
const STREAM_VAL: u64 = 3;
const STREAM_PROBE: u64 = 4;

/// Independent generator for `(tag, index)`, so a resumed run draws exactly
/// what an uninterrupted one would.
fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((tag << 48) ^ index);
    r
}

fn crop(img: &Image, y: usize, x: usize, size: usize) -> Tensor {
    let (w, c) = (img.width(), img.channels());
    let mut data = Vec::with_capacity(size * size * c);
    for i in y..y + size {
        let row = (i * w + x) * c;
        data.extend_from_slice(&img.values()[row..row + size * c]);
    }
    Tensor::new(&[1, size, size, c], data).expect("crop extents are valid")
}

/// A random crop of `img` and its bicubic downsampling by a random scale.
pub fn draw_pair<R: Rng + ?Sized>(img: &Image, cfg: &TrainConfig, rng: &mut R) -> Result<TrainPair> {
    let p = cfg.patch;
    if img.height() < p || img.width() < p {
        return Err(Error::shape(format!(
            "{}×{} image is smaller than the {p}×{p} training crop",
            img.height(),
            img.width()
        )));
    }
    let y = rng.random_range(0..=img.height() - p);
    let x = rng.random_range(0..=img.width() - p);
    let scale = if cfg.scale_max > cfg.scale_min {
        rng.random_range(cfg.scale_min..=cfg.scale_max)
    } else {
        cfg.scale_min
    };
    let hr = crop(&img.to_rgb(), y, x, p);
    let lr = bicubic_resize(&hr, lr_extent(p, scale), lr_extent(p, scale))?;
    Ok(TrainPair { hr, lr })
}

fn draw_items<R: Rng + ?Sized>(
    model: &ModelParams,
    imgs: &[&Image],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<LossItem>> {
    imgs.iter()
        .map(|img| LossItem::draw(&draw_pair(img, cfg, rng)?, &model.schedule, rng))
        .collect()
}

fn log_row(path: &Path, row: &str, fresh: bool) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let text = if fresh {
        format!("{LOSS_CSV_HEADER}\n{row}\n")
    } else {
        format!("{row}\n")
    };
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Train from `state` until `cfg.steps` total steps or early stopping.
///
/// With `paths`, the loss log is written (appended when resuming) and the
/// best and last checkpoints are refreshed at every epoch end.
pub fn train(
    mut state: TrainState,
    patches: &[Image],
    cfg: &TrainConfig,
    seed: u64,
    paths: Option<&TrainPaths>,
) -> Result<(TrainState, TrainReport)> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let clock = Instant::now();
    let (train_idx, val_idx) = split_indices(patches.len(), cfg.val_fraction, seed);
    let per_epoch = train_idx.len().div_ceil(cfg.batch_size) as u64;

    let val_imgs: Vec<&Image> = val_idx
        .iter()
        .flat_map(|&i| std::iter::repeat_n(&patches[i], cfg.val_draws))
        .collect();
    let val_items = draw_items(&state.model, &val_imgs, cfg, &mut stream(seed, STREAM_VAL, 0))?;
    let mut probe_rng = stream(seed, STREAM_PROBE, 0);
    let probe_imgs: Vec<&Image> = (0..cfg.probe_items)
        .map(|_| &patches[train_idx[probe_rng.random_range(0..train_idx.len())]])
        .collect();
    let probe_items = draw_items(&state.model, &probe_imgs, cfg, &mut probe_rng)?;
    let initial_probe_loss = batch_loss(&state.model, &probe_items, false)?.0;

    if let Some(p) = paths {
        fs::create_dir_all(&p.dir).map_err(|e| Error::io(&p.dir, e))?;
    }
    let mut fresh_log = state.progress.step == 0;
    let start_step = state.progress.step;
    let mut stopped_early = false;
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = u64::MAX;

    while state.progress.step < cfg.steps {
        let step = state.progress.step;
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = train_idx.clone();
            order.shuffle(&mut stream(seed, STREAM_EPOCH, epoch));
            order_epoch = epoch;
        }
        let pos = (step % per_epoch) as usize * cfg.batch_size;
        let batch: Vec<&Image> = order[pos..(pos + cfg.batch_size).min(order.len())]
            .iter()
            .map(|&i| &patches[i])
            .collect();
        let items = draw_items(&state.model, &batch, cfg, &mut stream(seed, STREAM_STEP, step))?;
        let (loss, grad) = batch_loss(&state.model, &items, true)?;
        let lr = cfg.lr.lr_at(step as f64 / per_epoch as f64);
        let mut flat = state.model.net.to_flat();
        adam_step(&mut state.optimizer, &cfg.adam, &mut flat, &grad, lr)?;
        state.model.net = state.model.net.from_flat(&flat)?;
        state.progress.step += 1;

        let epoch_end = state.progress.step.is_multiple_of(per_epoch) || state.progress.step == cfg.steps;
        let mut val_loss = None;
        if epoch_end {
            state.progress.epoch = state.progress.step.div_ceil(per_epoch);
            let v = if val_items.is_empty() {
                batch_loss(&state.model, &probe_items, false)?.0
            } else {
                batch_loss(&state.model, &val_items, false)?.0
            };
            val_loss = Some(v);
            if state.progress.best_val.is_none_or(|b| v < b) {
                state.progress.best_val = Some(v);
                state.progress.stale_epochs = 0;
                if let Some(p) = paths {
                    state.model.save(p.best(), state.progress)?;
                }
            } else {
                state.progress.stale_epochs += 1;
            }
            if let Some(p) = paths {
                state.save(p)?;
            }
        }
        if let Some(p) = paths {
            let row = format!(
                "{},{},{:e},{:e},{}",
                state.progress.step,
                epoch,
                lr,
                loss,
                val_loss.map(|v| format!("{v:e}")).unwrap_or_default()
            );
            log_row(&p.loss_log(), &row, fresh_log)?;
            fresh_log = false;
        }
        if state.progress.stale_epochs > cfg.patience {
            stopped_early = true;
            break;
        }
    }

    let final_probe_loss = batch_loss(&state.model, &probe_items, false)?.0;
    let report = TrainReport {
        start_step,
        steps: state.progress.step,
        epochs: state.progress.epoch,
        initial_probe_loss,
        final_probe_loss,
        best_val: state.progress.best_val,
        stopped_early,
        wall_s: clock.elapsed().as_secs_f64(),
    };
    Ok((state, report))
}
