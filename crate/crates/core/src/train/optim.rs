//! Bias-corrected Adam over a flat parameter vector.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::container::{load_named, save_named};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_named(
            &[
                ("step".into(), Tensor::scalar(self.step as f64)),
                ("m".into(), Tensor::from_vec(self.m.clone())),
                ("v".into(), Tensor::from_vec(self.v.clone())),
            ],
            path,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let e = load_named(path)?;
        match e.as_slice() {
            [(a, s), (b, m), (c, v)] if a == "step" && b == "m" && c == "v" && m.len() == v.len() => {
                Ok(OptimizerState {
                    step: s.data()[0] as u64,
                    m: m.data().to_vec(),
                    v: v.data().to_vec(),
                })
            }
            _ => Err(Error::format(path, "not an optimizer state file")),
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(
    state: &mut OptimizerState,
    cfg: &AdamConfig,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
) -> Result<()> {
    if params.len() != state.len() || grads.len() != state.len() {
        return Err(Error::shape(format!(
            "adam state of length {} with {} parameters and {} gradients",
            state.len(),
            params.len(),
            grads.len()
        )));
    }
    state.step += 1;
    let b1t = 1.0 - cfg.beta1.powi(state.step as i32);
    let b2t = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / b1t;
        let vh = state.v[i] / b2t;
        params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}
