//! Real per-mode spectral multipliers and their tape node.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::fft::{irfft2_bhwc, rfft2_bhwc};
use crate::tensor::Tensor;

use super::{conditional_moments, DegradationOp, DiffusionSchedule};

/// `Re ifft2(w ⊙ fft2(x))` with one real weight per mode, shared by all
/// batch items and channels. For weights symmetric under `ξ → −ξ` the
/// discarded imaginary part is round-off.
pub fn spectral_filter(x: &Tensor, weights: &[f64], h: usize, w: usize) -> Result<Tensor> {
    let (b, xh, xw, c) = x.dims4()?;
    if (xh, xw) != (h, w) || weights.len() != h * w {
        return Err(Error::shape(format!(
            "spectral filter for {h}×{w} applied to a {xh}×{xw} grid"
        )));
    }
    let mut spec = rfft2_bhwc(x)?;
    for (k, z) in spec.iter_mut().enumerate() {
        *z *= weights[(k / c) % (h * w)];
    }
    irfft2_bhwc(spec, b, h, w, c)
}

/// Which time-dependent multiplier built from the conditional moments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FilterKind {
    /// `1/√v̂`
    InvStd,
    /// `m̂/√v̂`
    MeanOverStd,
    /// `1/v̂`
    InvVar,
    /// `m̂/v̂`
    MeanOverVar,
    /// `m̂`
    Mean,
    /// `1/(m̂²σ² + v̂)`: precision of `x_t` when `x_0 ~ N(μ, σ²)`.
    PriorInvVar(f64),
    /// `m̂/(m̂²σ² + v̂)`
    PriorMeanOverVar(f64),
}

/// A multiplier `w(ξ, t)` together with its time derivative.
#[derive(Clone, Debug)]
pub struct MomentFilter {
    pub kind: FilterKind,
    pub schedule: DiffusionSchedule,
    pub op: DegradationOp,
}

impl MomentFilter {
    pub fn new(kind: FilterKind, schedule: DiffusionSchedule, op: DegradationOp) -> Self {
        MomentFilter { kind, schedule, op }
    }

    /// Per-mode weights and their derivatives with respect to `t`.
    pub fn weights(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = conditional_moments(t, &self.schedule, &self.op)?;
        let n = m.mean.len();
        let mut w = Vec::with_capacity(n);
        let mut dw = Vec::with_capacity(n);
        for p in 0..n {
            let (a, da, v, dv) = (m.mean[p], m.dmean[p], m.var[p], m.dvar[p]);
            let (wp, dwp) = match self.kind {
                FilterKind::InvStd => (v.powf(-0.5), -0.5 * v.powf(-1.5) * dv),
                FilterKind::MeanOverStd => {
                    (a * v.powf(-0.5), da * v.powf(-0.5) - 0.5 * a * v.powf(-1.5) * dv)
                }
                FilterKind::InvVar => (1.0 / v, -dv / (v * v)),
                FilterKind::MeanOverVar => (a / v, da / v - a * dv / (v * v)),
                FilterKind::Mean => (a, da),
                FilterKind::PriorInvVar(s2) => {
                    let d = a * a * s2 + v;
                    let dd = 2.0 * a * da * s2 + dv;
                    (1.0 / d, -dd / (d * d))
                }
                FilterKind::PriorMeanOverVar(s2) => {
                    let d = a * a * s2 + v;
                    let dd = 2.0 * a * da * s2 + dv;
                    (a / d, da / d - a * dd / (d * d))
                }
            };
            w.push(wp);
            dw.push(dwp);
        }
        if !w.iter().chain(&dw).all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("{:?} spectral weights at t = {t}", self.kind),
            });
        }
        Ok((w, dw))
    }
}

/// Differentiable [`spectral_filter`] whose weights depend on the scalar
/// time variable `t` (a one-element tensor on the tape).
pub fn spectral_filter_var(tape: &mut Tape, x: Var, t: Var, filter: &MomentFilter) -> Result<Var> {
    if tape.value(t).len() != 1 {
        return Err(Error::shape("filter time must be a one-element tensor"));
    }
    let tv = tape.value(t).data()[0];
    let (h, w) = (filter.op.height(), filter.op.width());
    let (wt, dwt) = filter.weights(tv)?;
    let value = spectral_filter(tape.value(x), &wt, h, w)?;
    Ok(tape.push(
        "spectral_filter",
        value,
        &[x, t],
        Box::new(move |ctx| {
            let dx = ctx.needs[0]
                .then(|| spectral_filter(ctx.grad, &wt, h, w))
                .transpose()?;
            let dt = ctx.needs[1]
                .then(|| -> Result<Tensor> {
                    let dy = spectral_filter(ctx.inputs[0], &dwt, h, w)?;
                    Ok(Tensor::scalar(
                        dy.data().iter().zip(ctx.grad.data()).map(|(a, g)| a * g).sum(),
                    ))
                })
                .transpose()?;
            Ok(vec![dx, dt])
        }),
    ))
}

impl Tape {
    /// `D x`, the ideal low-pass projection, as a tape node.
    pub fn low_pass(&mut self, x: Var, op: &DegradationOp) -> Result<Var> {
        let (h, w) = (op.height(), op.width());
        let mask: Vec<f64> = op.low_mask().iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let value = spectral_filter(self.value(x), &mask, h, w)?;
        Ok(self.push(
            "low_pass",
            value,
            &[x],
            Box::new(move |ctx| Ok(vec![Some(spectral_filter(ctx.grad, &mask, h, w)?)])),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn time_derivative_matches_finite_difference() {
        let op = DegradationOp::new(6, 5, 2.0).unwrap();
        let s = DiffusionSchedule::default();
        for kind in [
            FilterKind::InvStd,
            FilterKind::MeanOverStd,
            FilterKind::InvVar,
            FilterKind::MeanOverVar,
            FilterKind::Mean,
            FilterKind::PriorInvVar(0.01),
            FilterKind::PriorMeanOverVar(0.01),
        ] {
            let f = MomentFilter::new(kind, s, op.clone());
            let (_, dw) = f.weights(0.4).unwrap();
            let (wp, _) = f.weights(0.4 + 1e-6).unwrap();
            let (wm, _) = f.weights(0.4 - 1e-6).unwrap();
            for p in 0..dw.len() {
                let fd = (wp[p] - wm[p]) / 2e-6;
                assert!((fd - dw[p]).abs() <= 1e-5 * (1.0 + dw[p].abs()), "{kind:?}");
            }
        }
    }

    #[test]
    fn tape_gradients_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let op = DegradationOp::new(4, 6, 2.0).unwrap();
        let f = MomentFilter::new(FilterKind::MeanOverStd, DiffusionSchedule::default(), op);
        let x0 = Tensor::randn(&[2, 4, 6, 2], 1.0, &mut rng);
        let probe = Tensor::randn(&[2, 4, 6, 2], 1.0, &mut rng);
        let eval = |x: &Tensor, t: f64| {
            let (w, _) = f.weights(t).unwrap();
            spectral_filter(x, &w, 4, 6).unwrap().mul(&probe).unwrap().sum()
        };
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let t = tape.param(Tensor::scalar(0.3));
        let y = spectral_filter_var(&mut tape, x, t, &f).unwrap();
        let pr = tape.constant(probe.clone());
        let prod = tape.mul(y, pr).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        let h = 1e-6;
        let fd_t = (eval(&x0, 0.3 + h) - eval(&x0, 0.3 - h)) / (2.0 * h);
        let gt = g.get(t).unwrap().data()[0];
        assert!((fd_t - gt).abs() <= 1e-6 * (1.0 + gt.abs()));
        for k in [0, 7, 30] {
            let mut xp = x0.clone();
            xp.data_mut()[k] += h;
            let mut xm = x0.clone();
            xm.data_mut()[k] -= h;
            let fd = (eval(&xp, 0.3) - eval(&xm, 0.3)) / (2.0 * h);
            let an = g.get(x).unwrap().data()[k];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()));
        }
    }
}
