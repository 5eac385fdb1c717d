//! Sinusoidal time embedding.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeEmbeddingConfig {
    /// Number of frequencies; the embedding vector has `2 · dim` entries.
    pub dim: usize,
    pub omega_min: f64,
    pub omega_max: f64,
}

impl Default for TimeEmbeddingConfig {
    fn default() -> Self {
        TimeEmbeddingConfig {
            dim: 64,
            omega_min: 1.0,
            omega_max: 10_000.0,
        }
    }
}

impl TimeEmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time embedding dim must be even and >= 2, got {}",
                self.dim
            )));
        }
        if !(self.omega_min > 0.0 && self.omega_min < self.omega_max) {
            return Err(Error::Config("time embedding needs 0 < omega_min < omega_max".into()));
        }
        Ok(())
    }

    /// `ω_i = ω_min (ω_max/ω_min)^((i−1)/(D−1))` for `i = 1..D`.
    pub fn frequencies(&self) -> Vec<f64> {
        let d = self.dim;
        let ratio = self.omega_max / self.omega_min;
        (0..d)
            .map(|i| {
                if i == d - 1 {
                    self.omega_max
                } else {
                    self.omega_min * ratio.powf(i as f64 / (d - 1) as f64)
                }
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        2 * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.dim == 0
    }
}

/// `[sin(ω_1 t), cos(ω_1 t), …, sin(ω_D t), cos(ω_D t)]`.
pub fn time_embedding(t: f64, cfg: &TimeEmbeddingConfig) -> Vec<f64> {
    cfg.frequencies()
        .iter()
        .flat_map(|&w| [(w * t).sin(), (w * t).cos()])
        .collect()
}

impl Tape {
    /// Time embedding of the one-element tensor `t`.
    pub fn time_embedding(&mut self, t: Var, cfg: &TimeEmbeddingConfig) -> Result<Var> {
        if self.value(t).len() != 1 {
            return Err(Error::shape("time must be a one-element tensor"));
        }
        let tv = self.value(t).data()[0];
        let freqs = cfg.frequencies();
        let value = Tensor::from_vec(time_embedding(tv, cfg));
        Ok(self.push(
            "time_embedding",
            value,
            &[t],
            Box::new(move |ctx| {
                let e = ctx.output.data();
                let g = ctx.grad.data();
                // d sin(ωt) = ω cos(ωt), d cos(ωt) = −ω sin(ωt)
                let d: f64 = freqs
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| w * (g[2 * i] * e[2 * i + 1] - g[2 * i + 1] * e[2 * i]))
                    .sum();
                Ok(vec![Some(Tensor::scalar(d))])
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time_alternates() {
        let e = time_embedding(0.0, &TimeEmbeddingConfig::default());
        assert_eq!(e.len(), 128);
        for (i, v) in e.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn frequency_schedule_endpoints() {
        let f = TimeEmbeddingConfig::default().frequencies();
        assert_eq!(f[0], 1.0);
        assert_eq!(f[63], 10_000.0);
        // 10000^(1/63) = 1.1574228805920572 (high-precision evaluation)
        assert!((f[1] - 1.157_422_880_592_057).abs() < 1e-12);
    }

    #[test]
    fn tape_derivative_matches_difference() {
        let cfg = TimeEmbeddingConfig { dim: 8, omega_min: 1.0, omega_max: 50.0 };
        let w: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = |t: f64| time_embedding(t, &cfg).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let mut tape = Tape::new();
        let t = tape.param(Tensor::scalar(0.31));
        let e = tape.time_embedding(t, &cfg).unwrap();
        let wv = tape.constant(Tensor::from_vec(w.clone()));
        let p = tape.mul(e, wv).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap().get(t).unwrap().data()[0];
        let fd = (f(0.31 + 1e-6) - f(0.31 - 1e-6)) / 2e-6;
        assert!((g - fd).abs() < 1e-6 * (1.0 + g.abs()));
    }
}
