//! Explicit Runge–Kutta integrators on tensor states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn finite(x: Tensor, t: f64) -> Result<Tensor> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite {
            what: format!("ODE state at t = {t}"),
        })
    }
}

/// One classical fourth-order step `x + (h/6)(k1 + 2k2 + 2k3 + k4)`.
pub fn rk4_step<F>(x: &Tensor, t: f64, h: f64, drift: &mut F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let k1 = drift(x, t)?;
    let mut x2 = x.clone();
    x2.axpy(0.5 * h, &k1)?;
    let k2 = drift(&x2, t + 0.5 * h)?;
    let mut x3 = x.clone();
    x3.axpy(0.5 * h, &k2)?;
    let k3 = drift(&x3, t + 0.5 * h)?;
    let mut x4 = x.clone();
    x4.axpy(h, &k3)?;
    let k4 = drift(&x4, t + h)?;
    let mut out = x.clone();
    out.axpy(h / 6.0, &k1)?;
    out.axpy(h / 3.0, &k2)?;
    out.axpy(h / 3.0, &k3)?;
    out.axpy(h / 6.0, &k4)?;
    finite(out, t + h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rk45Options {
    pub atol: f64,
    pub rtol: f64,
    pub h0: f64,
    pub h_min: f64,
}

impl Default for Rk45Options {
    fn default() -> Self {
        Rk45Options {
            atol: 1e-6,
            rtol: 1e-6,
            h0: 1e-2,
            h_min: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rk45Stats {
    pub accepted: usize,
    pub rejected: usize,
    pub nfe: usize,
    /// `t_start` followed by the end time of every accepted step.
    pub times: Vec<f64>,
}

// Dormand–Prince 5(4) tableau
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand–Prince integration from `t_start` to `t_end` (either
/// direction). A step is accepted when `‖err‖∞ ≤ atol + rtol·‖x‖∞`; the step
/// size is rescaled by `0.9 (tol/err)^{1/5}` clamped to `[0.2, 5]`.
pub fn rk45_integrate<F>(
    x0: &Tensor,
    t_start: f64,
    t_end: f64,
    drift: &mut F,
    opts: &Rk45Options,
) -> Result<(Tensor, Rk45Stats)>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if !(opts.atol > 0.0 && opts.rtol >= 0.0 && opts.h0 > 0.0 && opts.h_min > 0.0) {
        return Err(Error::invalid(format!("invalid RK45 options {opts:?}")));
    }
    let span = t_end - t_start;
    let dir = span.signum();
    let mut stats = Rk45Stats {
        times: vec![t_start],
        ..Rk45Stats::default()
    };
    let mut x = x0.clone();
    let mut t = t_start;
    if span == 0.0 {
        return Ok((x, stats));
    }
    let mut h = opts.h0.min(span.abs());
    let mut k: Vec<Tensor> = Vec::with_capacity(7);
    let mut first_same_as_last: Option<Tensor> = None;
    while (t_end - t) * dir > 0.0 {
        let remaining = (t_end - t).abs();
        let last = h >= remaining;
        let step = if last { remaining } else { h };
        let hs = dir * step;
        k.clear();
        k.push(match first_same_as_last.take() {
            Some(k7) => k7,
            None => {
                stats.nfe += 1;
                drift(&x, t)?
            }
        });
        for s in 1..7 {
            let mut xs = x.clone();
            for (j, kj) in k.iter().enumerate() {
                if A[s][j] != 0.0 {
                    xs.axpy(hs * A[s][j], kj)?;
                }
            }
            stats.nfe += 1;
            k.push(drift(&xs, t + C[s] * hs)?);
        }
        let mut x5 = x.clone();
        let mut err = Tensor::zeros(x.shape());
        for s in 0..7 {
            if B5[s] != 0.0 {
                x5.axpy(hs * B5[s], &k[s])?;
            }
            err.axpy(hs * (B5[s] - B4[s]), &k[s])?;
        }
        let e = err.max_abs();
        let tol = opts.atol + opts.rtol * x.max_abs().max(x5.max_abs());
        if !e.is_finite() {
            return Err(Error::NonFinite {
                what: format!("RK45 error estimate at t = {t}"),
            });
        }
        let factor = if e == 0.0 {
            5.0
        } else {
            (0.9 * (tol / e).powf(0.2)).clamp(0.2, 5.0)
        };
        if e <= tol {
            stats.accepted += 1;
            t = if last { t_end } else { t + hs };
            x = finite(x5, t)?;
            stats.times.push(t);
            first_same_as_last = k.pop();
            h = step * factor;
        } else {
            stats.rejected += 1;
            h = step * factor;
            if h < opts.h_min {
                return Err(Error::StepUnderflow {
                    t,
                    h,
                    h_min: opts.h_min,
                });
            }
        }
        h = h.max(opts.h_min);
    }
    Ok((x, stats))
}
