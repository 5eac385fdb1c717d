//! Adaptive time-step reparameterization.
//!
//! `φ(t) = Σ_k ψ_k t^k / Σ_k ψ_k T^k` with `ψ_k = exp(ω_k)`, `k = 1..K`.
//! Since every `ψ_k > 0`, `φ` is strictly increasing from `φ(0) = 0` to
//! `φ(T) = 1`, and the grid `t_i = φ⁻¹(i/N)` is well defined.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INVERSE_TOL: f64 = 1e-12;
const INVERSE_MAX_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtsParams {
    pub omega: Vec<f64>,
    pub horizon: f64,
}

impl Default for AtsParams {
    fn default() -> Self {
        AtsParams {
            omega: vec![0.0, -40.0, -40.0],
            horizon: 1.0,
        }
    }
}

impl AtsParams {
    pub fn new(omega: Vec<f64>, horizon: f64) -> Result<Self> {
        let a = AtsParams { omega, horizon };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.omega.is_empty() {
            return Err(Error::invalid("ATS needs at least one basis weight"));
        }
        if !(self.horizon > 0.0) || !self.omega.iter().all(|w| w.is_finite()) {
            return Err(Error::invalid("ATS weights must be finite and T positive"));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.omega.len()
    }

    pub fn psi(&self) -> Vec<f64> {
        // shifting every ω by the same constant leaves φ unchanged
        let top = self.omega.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        self.omega.iter().map(|w| (w - top).exp()).collect()
    }

    fn poly(&self, psi: &[f64], t: f64) -> f64 {
        psi.iter()
            .enumerate()
            .map(|(k, p)| p * t.powi(k as i32 + 1))
            .sum()
    }

    fn dpoly(&self, psi: &[f64], t: f64) -> f64 {
        psi.iter()
            .enumerate()
            .map(|(k, p)| p * (k + 1) as f64 * t.powi(k as i32))
            .sum()
    }

    /// `φ(t)`.
    pub fn phi(&self, t: f64) -> f64 {
        let psi = self.psi();
        self.poly(&psi, t) / self.poly(&psi, self.horizon)
    }

    /// `∂φ/∂t`.
    pub fn dphi_dt(&self, t: f64) -> f64 {
        let psi = self.psi();
        self.dpoly(&psi, t) / self.poly(&psi, self.horizon)
    }

    /// `∂φ(t)/∂ω_k` for every `k`.
    pub fn dphi_domega(&self, t: f64) -> Vec<f64> {
        let psi = self.psi();
        let st = self.poly(&psi, t);
        let sh = self.poly(&psi, self.horizon);
        psi.iter()
            .enumerate()
            .map(|(k, p)| {
                let e = k as i32 + 1;
                p * (t.powi(e) / sh - st * self.horizon.powi(e) / (sh * sh))
            })
            .collect()
    }

    /// The unique `t ∈ [0, T]` with `φ(t) = s`, by Newton steps kept inside
    /// a shrinking bracket (bisection when Newton leaves it).
    pub fn phi_inverse(&self, s: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::invalid(format!("phi_inverse needs s in [0, 1], got {s}")));
        }
        if s == 0.0 {
            return Ok(0.0);
        }
        if s == 1.0 {
            return Ok(self.horizon);
        }
        let (mut lo, mut hi) = (0.0, self.horizon);
        let mut t = s * self.horizon;
        for _ in 0..INVERSE_MAX_ITERS {
            let r = self.phi(t) - s;
            if r.abs() <= INVERSE_TOL {
                return Ok(t);
            }
            if r > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let d = self.dphi_dt(t);
            let newton = t - r / d;
            t = if d > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= f64::EPSILON * self.horizon {
                break;
            }
        }
        Ok(t)
    }
}

/// Strictly increasing times `t_0 = 0 < … < t_N = T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn uniform(n: usize, horizon: f64) -> Result<Self> {
        build_time_grid(n, &AtsParams::new(vec![0.0], horizon)?)
    }
}

/// `t_i = φ⁻¹(i/N)` for `i = 0..N`.
pub fn build_time_grid(n: usize, ats: &AtsParams) -> Result<TimeGrid> {
    if n == 0 {
        return Err(Error::invalid("time grid needs N >= 1"));
    }
    ats.validate()?;
    let mut times = Vec::with_capacity(n + 1);
    for i in 0..=n {
        times.push(if i == n {
            ats.horizon
        } else {
            ats.phi_inverse(i as f64 / n as f64)?
        });
    }
    if !times.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::invalid(
            "time grid is not strictly increasing (weights too extreme for N)",
        ));
    }
    Ok(TimeGrid { times })
}

impl Tape {
    /// The time grid as a differentiable function of `ω` (a `K`-vector).
    ///
    /// Interior times satisfy `φ(t_i; ω) = i/N`, so by implicit
    /// differentiation `∂t_i/∂ω_k = −(∂φ/∂ω_k) / (∂φ/∂t)`; the endpoints
    /// are fixed.
    pub fn time_grid(&mut self, omega: Var, n: usize, horizon: f64) -> Result<Var> {
        let ats = AtsParams::new(self.value(omega).data().to_vec(), horizon)?;
        let grid = build_time_grid(n, &ats)?;
        let k = ats.k();
        let mut jac = vec![0.0; (n + 1) * k];
        for i in 1..n {
            let t = grid.times[i];
            let d = ats.dphi_dt(t);
            for (kk, dk) in ats.dphi_domega(t).into_iter().enumerate() {
                jac[i * k + kk] = -dk / d;
            }
        }
        Ok(self.push(
            "time_grid",
            Tensor::from_vec(grid.times),
            &[omega],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![0.0; k];
                for i in 0..=n {
                    for (kk, dk) in d.iter_mut().enumerate() {
                        *dk += g[i] * jac[i * k + kk];
                    }
                }
                Ok(vec![Some(Tensor::from_vec(d))])
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_and_cubic_cases() {
        let lin = AtsParams::new(vec![0.0], 1.0).unwrap();
        assert_eq!(lin.phi(0.37), 0.37);
        let even = AtsParams::new(vec![0.0, 0.0, 0.0], 1.0).unwrap();
        assert!((even.phi(0.5) - 0.291_666_666_666_666_7).abs() < 1e-15);
        let cubic = AtsParams::new(vec![-40.0, -40.0, 0.0], 1.0).unwrap();
        let g = build_time_grid(2, &cubic).unwrap();
        assert!((g.times[1] - 0.5f64.cbrt()).abs() < 1e-9);
        assert!((g.times[1] - 0.793_701).abs() < 1e-6);
    }

    #[test]
    fn default_init_is_numerically_uniform() {
        let g = build_time_grid(4, &AtsParams::default()).unwrap();
        for (i, t) in g.times.iter().enumerate() {
            assert!((t - i as f64 / 4.0).abs() < 1e-12);
        }
        assert_eq!(TimeGrid::uniform(4, 1.0).unwrap().times, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn derivatives_match_differences() {
        let a = AtsParams::new(vec![0.3, -0.5, 1.1], 1.0).unwrap();
        let h = 1e-6;
        let fd = (a.phi(0.4 + h) - a.phi(0.4 - h)) / (2.0 * h);
        assert!((fd - a.dphi_dt(0.4)).abs() < 1e-8);
        let d = a.dphi_domega(0.4);
        for k in 0..3 {
            let mut p = a.clone();
            p.omega[k] += h;
            let mut m = a.clone();
            m.omega[k] -= h;
            let fd = (p.phi(0.4) - m.phi(0.4)) / (2.0 * h);
            assert!((fd - d[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn grid_node_gradient_matches_difference() {
        let omega = vec![0.2, -0.3, 0.5];
        let w: Vec<f64> = (0..7).map(|i| (i as f64).sin()).collect();
        let f = |om: &[f64]| {
            let g = build_time_grid(6, &AtsParams::new(om.to_vec(), 1.0).unwrap()).unwrap();
            g.times.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut tape = Tape::new();
        let o = tape.param(Tensor::from_vec(omega.clone()));
        let g = tape.time_grid(o, 6, 1.0).unwrap();
        let wv = tape.constant(Tensor::from_vec(w.clone()));
        let p = tape.mul(g, wv).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        let an = grads.get(o).unwrap().data().to_vec();
        for k in 0..3 {
            let mut p = omega.clone();
            p[k] += 1e-6;
            let mut m = omega.clone();
            m[k] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - an[k]).abs() < 1e-7, "{k}: {fd} vs {}", an[k]);
        }
    }
}
