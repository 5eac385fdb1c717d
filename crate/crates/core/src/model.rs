//! The complete learnable state and its checkpoint files.
//!
//! A checkpoint at `path` is a named tensor container holding every network
//! parameter, plus a JSON manifest at `path.json` recording the network
//! configuration, diffusion schedule, ATS weights and training progress.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::nn::{ScoreNet, ScoreNetConfig, ScoreNetParams};
use crate::sampler::AtsParams;
use crate::tensor::container::{load_named, save_named};
use crate::tensor::Tensor;

const MANIFEST_FORMAT: &str = "wfno-checkpoint";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ScoreNetConfig,
    pub schedule: DiffusionSchedule,
    pub net: ScoreNetParams,
    pub ats: AtsParams,
}

/// Training position stored alongside a checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub step: u64,
    pub epoch: u64,
    pub best_val: Option<f64>,
    /// Completed epochs since the validation loss last improved.
    #[serde(default)]
    pub stale_epochs: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    config: ScoreNetConfig,
    schedule: DiffusionSchedule,
    ats: AtsParams,
    progress: Progress,
    parameters: Vec<String>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    sidecar(path, "json")
}

/// `path` with `.ext` appended to its file name.
pub fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(
        config: ScoreNetConfig,
        schedule: DiffusionSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        schedule.validate()?;
        let net = ScoreNet::init(&config, rng)?;
        Ok(ModelParams {
            ats: AtsParams {
                horizon: schedule.horizon,
                ..AtsParams::default()
            },
            config,
            schedule,
            net,
        })
    }

    /// Network parameters followed by the ATS weights.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.net.to_flat();
        v.extend_from_slice(&self.ats.omega);
        v
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        let n = self.net.num_scalars();
        if flat.len() != n + self.ats.k() {
            return Err(Error::shape(format!(
                "flat vector of length {} for {} parameters",
                flat.len(),
                n + self.ats.k()
            )));
        }
        Ok(ModelParams {
            config: self.config.clone(),
            schedule: self.schedule,
            net: self.net.from_flat(&flat[..n])?,
            ats: AtsParams::new(flat[n..].to_vec(), self.ats.horizon)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, progress: Progress) -> Result<()> {
        let path = path.as_ref();
        let entries = self.net.entries();
        save_named(&entries, path)?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            config: self.config.clone(),
            schedule: self.schedule,
            ats: self.ats.clone(),
            progress,
            parameters: entries.into_iter().map(|(n, _)| n).collect(),
        };
        let mp = manifest_path(path);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Progress)> {
        let path = path.as_ref();
        let mp = manifest_path(path);
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&mp, e.to_string()))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::format(&mp, "not a version 1 checkpoint manifest"));
        }
        m.config.validate()?;
        m.schedule.validate()?;
        m.ats.validate()?;
        let entries = load_named(path)?;
        let names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
        if names != m.parameters.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::format(path, "tensor names disagree with the manifest"));
        }
        // expected shapes come from a network built from the manifest config
        let skeleton = skeleton(&m.config)?;
        let net = ScoreNet::from_entries(&skeleton, &entries)
            .map_err(|e| Error::format(path, e.to_string()))?;
        if !net.is_finite() {
            return Err(Error::format(path, "checkpoint holds non-finite parameters"));
        }
        Ok((
            ModelParams {
                config: m.config,
                schedule: m.schedule,
                net,
                ats: m.ats,
            },
            m.progress,
        ))
    }
}

fn skeleton(cfg: &ScoreNetConfig) -> Result<ScoreNetParams> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let net = ScoreNet::init(cfg, &mut rng)?;
    net.try_map(&mut |_, t| Ok(Tensor::zeros(t.shape())))
}
