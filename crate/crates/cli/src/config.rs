//! The JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wfno_core::diffusion::DiffusionSchedule;
use wfno_core::nn::ScoreNetConfig;
use wfno_core::sampler::{AtsFitOptions, DriftForm, SamplerOptions, SolverMode};
use wfno_core::train::TrainConfig;
use wfno_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub steps: usize,
    pub mode: SolverMode,
    pub drift: DriftForm,
    pub noise: bool,
    /// ATS weights overriding the checkpoint and its sidecar.
    pub omega: Option<Vec<f64>>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let o = SamplerOptions::default();
        SamplerSection {
            steps: o.steps,
            mode: o.mode,
            drift: o.drift,
            noise: o.noise,
            omega: None,
        }
    }
}

impl SamplerSection {
    pub fn options(&self) -> SamplerOptions {
        SamplerOptions {
            steps: self.steps,
            mode: self.mode,
            drift: self.drift,
            noise: self.noise,
            ..SamplerOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub y_channel: bool,
    /// Timed runs for `bench`.
    pub runs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            y_channel: false,
            runs: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtsFitSection {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub iterations: usize,
    pub step: f64,
    /// Held-out patches used as fitting problems (at most).
    pub patches: usize,
}

impl Default for AtsFitSection {
    fn default() -> Self {
        let o = AtsFitOptions::default();
        AtsFitSection {
            n_coarse: o.n_coarse,
            n_fine: o.n_fine,
            iterations: o.iterations,
            step: o.step,
            patches: 4,
        }
    }
}

impl AtsFitSection {
    /// Fitting options; the drift form follows the sampler.
    pub fn options(&self, drift: DriftForm) -> AtsFitOptions {
        AtsFitOptions {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            iterations: self.iterations,
            step: self.step,
            drift,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Directory of high-resolution training patches.
    pub data_dir: PathBuf,
    /// Training output directory (checkpoints and loss log).
    pub run_dir: PathBuf,
    /// Checkpoint used by sample, bench and ats-fit; `run_dir/best.ckpt` when unset.
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data_dir: PathBuf::from("data/desk"),
            run_dir: PathBuf::from("runs/desk"),
            checkpoint: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl PathsSection {
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.run_dir.join("best.ckpt"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Super-resolution factor for degrade, sample, bench and ats-fit.
    pub scale: f64,
    pub schedule: DiffusionSchedule,
    pub model: ScoreNetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
    pub ats_fit: AtsFitSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    /// Desk-scale run on the bundled patches.
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.lr.lr_peak = 3e-3;
        train.patience = 500;
        RunConfig {
            seed: 0,
            scale: 2.0,
            schedule: DiffusionSchedule::default(),
            model: ScoreNetConfig::desk(),
            train,
            sampler: SamplerSection::default(),
            eval: EvalSection::default(),
            ats_fit: AtsFitSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 1.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be >= 1, got {}", self.scale)));
        }
        if self.sampler.steps == 0 {
            return Err(Error::Config("sampler.steps must be positive".into()));
        }
        if self.eval.runs == 0 {
            return Err(Error::Config("eval.runs must be positive".into()));
        }
        let f = &self.ats_fit;
        if f.patches == 0 || f.n_coarse == 0 || f.n_fine == 0 || !(f.step > 0.0) {
            return Err(Error::Config("ats_fit counts and step must be positive".into()));
        }
        self.schedule.validate()?;
        self.model.validate()?;
        self.train.validate()
    }
}
