//! Forward degradation diffusion.
//!
//! The forward process is the linear SDE
//! `dx = -½ β(t) (x − D x) dt + √β(t) dw` with a linear β schedule, where `D`
//! is an ideal low-pass projection on the high-resolution grid. Because `D`
//! is a symmetric spectral mask, the SDE decouples per Fourier mode and the
//! law of `x_t` given `x_0` is Gaussian with per-mode mean multiplier and
//! variance available in closed form.

mod filter;

pub use filter::{spectral_filter, spectral_filter_var, FilterKind, MomentFilter};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::fft::signed_freq;
use crate::tensor::{bicubic_resize, Image, Tensor};

/// Fraction of the horizon below which conditional scores are not evaluated.
pub const T_FLOOR_FRACTION: f64 = 1e-3;

/// Linear β schedule over `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule {
            beta_min: 0.1,
            beta_max: 20.0,
            horizon: 1.0,
        }
    }
}

impl DiffusionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min < self.beta_max && self.horizon > 0.0) {
            return Err(Error::invalid(format!(
                "schedule needs 0 < beta_min < beta_max and T > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// β(t).
    pub fn beta(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::invalid(format!(
                "t = {t} outside [0, {}]",
                self.horizon
            )));
        }
        Ok(self.beta_unchecked(t))
    }

    pub(crate) fn beta_unchecked(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t / self.horizon
    }

    /// `B(t) = ∫₀ᵗ β(s) ds`.
    pub fn beta_integral(&self, t: f64) -> f64 {
        self.beta_min * t + (self.beta_max - self.beta_min) * t * t / (2.0 * self.horizon)
    }

    /// Smallest time at which conditional scores are evaluated.
    pub fn t_floor(&self) -> f64 {
        T_FLOOR_FRACTION * self.horizon
    }
}

/// Ideal spectral low-pass projection on an `H × W` grid.
///
/// A mode `(u, v)` is kept iff `|u| ≤ floor(H/(2s))` and `|v| ≤ floor(W/(2s))`
/// in signed frequency units.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationOp {
    height: usize,
    width: usize,
    cutoff_u: usize,
    cutoff_v: usize,
    low: Vec<bool>,
}

impl DegradationOp {
    pub fn new(height: usize, width: usize, scale: f64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("degradation grid must be non-empty"));
        }
        if !(scale >= 1.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("scale must be >= 1, got {scale}")));
        }
        let cutoff_u = (height as f64 / (2.0 * scale)).floor() as usize;
        let cutoff_v = (width as f64 / (2.0 * scale)).floor() as usize;
        Ok(Self::with_cutoff(height, width, cutoff_u, cutoff_v))
    }

    /// Projection onto the band representable on an `lr_h × lr_w` grid,
    /// acting on an `hr_h × hr_w` grid (cutoffs `⌊lr_h/2⌋`, `⌊lr_w/2⌋`).
    pub fn between(lr_h: usize, lr_w: usize, hr_h: usize, hr_w: usize) -> Result<Self> {
        if lr_h == 0 || lr_w == 0 || lr_h > hr_h || lr_w > hr_w {
            return Err(Error::invalid(format!(
                "cannot degrade {hr_h}×{hr_w} to {lr_h}×{lr_w}"
            )));
        }
        Ok(Self::with_cutoff(hr_h, hr_w, lr_h / 2, lr_w / 2))
    }

    fn with_cutoff(height: usize, width: usize, cutoff_u: usize, cutoff_v: usize) -> Self {
        let low = (0..height * width)
            .map(|p| {
                let (u, v) = (p / width, p % width);
                signed_freq(u, height).unsigned_abs() as usize <= cutoff_u
                    && signed_freq(v, width).unsigned_abs() as usize <= cutoff_v
            })
            .collect();
        DegradationOp {
            height,
            width,
            cutoff_u,
            cutoff_v,
            low,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cutoff(&self) -> (usize, usize) {
        (self.cutoff_u, self.cutoff_v)
    }

    /// Whether mode index `p = u * W + v` lies in the retained band.
    pub fn is_low(&self, p: usize) -> bool {
        self.low[p]
    }

    pub fn low_mask(&self) -> &[bool] {
        &self.low
    }

    /// Project `x` onto the retained band.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let w: Vec<f64> = self.low.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        spectral_filter(x, &w, self.height, self.width)
    }
}

/// `D x`, the ideal low-pass projection.
pub fn apply_d(x: &Tensor, op: &DegradationOp) -> Result<Tensor> {
    op.apply(x)
}

/// Per-mode law of `x_t` given `x_0`: `x̂_t ~ m̂ x̂_0 + √v̂ ε̂`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Time derivatives of `mean` and `var`.
    pub dmean: Vec<f64>,
    pub dvar: Vec<f64>,
}

pub fn conditional_moments(
    t: f64,
    schedule: &DiffusionSchedule,
    op: &DegradationOp,
) -> Result<ConditionalMoments> {
    let beta = schedule.beta(t)?;
    let b = schedule.beta_integral(t);
    let decay = (-b).exp();
    let half = (-0.5 * b).exp();
    let n = op.low.len();
    let mut m = ConditionalMoments {
        mean: Vec::with_capacity(n),
        var: Vec::with_capacity(n),
        dmean: Vec::with_capacity(n),
        dvar: Vec::with_capacity(n),
    };
    for &low in &op.low {
        if low {
            m.mean.push(1.0);
            m.var.push(b);
            m.dmean.push(0.0);
            m.dvar.push(beta);
        } else {
            m.mean.push(half);
            // 1 - e^{-B} without cancellation for small B
            m.var.push(-(-b).exp_m1());
            m.dmean.push(-0.5 * beta * half);
            m.dvar.push(beta * decay);
        }
    }
    Ok(m)
}

fn white_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    t
}

fn check_grid(x: &Tensor, op: &DegradationOp) -> Result<()> {
    let (_, h, w, _) = x.dims4()?;
    if (h, w) != (op.height, op.width) {
        return Err(Error::shape(format!(
            "tensor grid {h}×{w} does not match degradation grid {}×{}",
            op.height, op.width
        )));
    }
    Ok(())
}

/// Draw `x_t` from its closed-form conditional given `x0`.
pub fn sample_xt<R: Rng + ?Sized>(
    x0: &Tensor,
    t: f64,
    schedule: &DiffusionSchedule,
    op: &DegradationOp,
    rng: &mut R,
) -> Result<Tensor> {
    check_grid(x0, op)?;
    let eps = white_noise(x0.shape(), rng);
    sample_xt_with_noise(x0, &eps, t, schedule, op)
}

/// [`sample_xt`] with caller-supplied pixel-space white noise.
pub fn sample_xt_with_noise(
    x0: &Tensor,
    eps: &Tensor,
    t: f64,
    schedule: &DiffusionSchedule,
    op: &DegradationOp,
) -> Result<Tensor> {
    check_grid(x0, op)?;
    x0.expect_same_shape(eps)?;
    let m = conditional_moments(t, schedule, op)?;
    if t == 0.0 {
        return Ok(x0.clone());
    }
    let std: Vec<f64> = m.var.iter().map(|v| v.sqrt()).collect();
    let mean = spectral_filter(x0, &m.mean, op.height, op.width)?;
    let noise = spectral_filter(eps, &std, op.height, op.width)?;
    mean.add(&noise)
}

/// Noise with the per-mode standard deviation of the conditional at time `t`.
pub fn structured_noise<R: Rng + ?Sized>(
    shape: &[usize],
    t: f64,
    schedule: &DiffusionSchedule,
    op: &DegradationOp,
    rng: &mut R,
) -> Result<Tensor> {
    let eps = white_noise(shape, rng);
    check_grid(&eps, op)?;
    let m = conditional_moments(t, schedule, op)?;
    let std: Vec<f64> = m.var.iter().map(|v| v.sqrt()).collect();
    spectral_filter(&eps, &std, op.height, op.width)
}

/// Conditional mean `E[x_t | x_0]`.
pub fn conditional_mean(
    x0: &Tensor,
    t: f64,
    schedule: &DiffusionSchedule,
    op: &DegradationOp,
) -> Result<Tensor> {
    check_grid(x0, op)?;
    let m = conditional_moments(t, schedule, op)?;
    spectral_filter(x0, &m.mean, op.height, op.width)
}

/// Gradient of `log p_t(x_t | x_0)`, computed per Fourier mode.
pub fn true_conditional_score(
    x_t: &Tensor,
    x0: &Tensor,
    t: f64,
    schedule: &DiffusionSchedule,
    op: &DegradationOp,
) -> Result<Tensor> {
    if t < schedule.t_floor() {
        return Err(Error::invalid(format!(
            "conditional score requested at t = {t} below the floor {}",
            schedule.t_floor()
        )));
    }
    check_grid(x_t, op)?;
    x_t.expect_same_shape(x0)?;
    let m = conditional_moments(t, schedule, op)?;
    let inv_var: Vec<f64> = m.var.iter().map(|v| -1.0 / v).collect();
    let mean_over_var: Vec<f64> = m.mean.iter().zip(&m.var).map(|(a, v)| a / v).collect();
    let a = spectral_filter(x_t, &inv_var, op.height, op.width)?;
    let b = spectral_filter(x0, &mean_over_var, op.height, op.width)?;
    a.add(&b)
}

/// LR size for a given HR extent and scale: `round(n / s)`, at least 1.
pub fn lr_extent(n: usize, scale: f64) -> usize {
    ((n as f64 / scale).round() as usize).max(1)
}

/// Bicubic downsampling used to build low-resolution conditioning images.
pub fn degrade(hr: &Image, scale: f64) -> Result<Image> {
    if !(scale >= 1.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be >= 1, got {scale}")));
    }
    let oh = (hr.height() as f64 / scale).round();
    let ow = (hr.width() as f64 / scale).round();
    if oh < 1.0 || ow < 1.0 {
        return Err(Error::invalid(format!(
            "degrading {}×{} by {scale} leaves less than one pixel",
            hr.height(),
            hr.width()
        )));
    }
    let lr = bicubic_resize(&hr.to_tensor(), oh as usize, ow as usize)?;
    Image::from_tensor(&lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_op() -> DegradationOp {
        DegradationOp::new(4, 4, 2.0).unwrap()
    }

    #[test]
    fn beta_endpoints_and_midpoint() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.beta(0.0).unwrap(), 0.1);
        assert_eq!(s.beta(1.0).unwrap(), 20.0);
        assert!((s.beta(0.5).unwrap() - 10.05).abs() < 1e-12);
        assert!(s.beta(1.5).is_err());
        assert!(s.beta(-0.1).is_err());
    }

    #[test]
    fn beta_integral_values_and_derivative() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.beta_integral(0.0), 0.0);
        assert!((s.beta_integral(1.0) - 10.05).abs() < 1e-12);
        let h = 1e-6;
        let fd = (s.beta_integral(0.3 + h) - s.beta_integral(0.3 - h)) / (2.0 * h);
        assert!((fd - s.beta(0.3).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn cutoff_convention() {
        let op = toy_op();
        assert_eq!(op.cutoff(), (1, 1));
        // signed frequencies 0, ±1 kept on both axes: 3 × 3 modes
        assert_eq!(op.low_mask().iter().filter(|&&l| l).count(), 9);
        let full = DegradationOp::new(16, 16, 1.0).unwrap();
        assert!(full.low_mask().iter().all(|&l| l));
        assert!(DegradationOp::new(4, 4, 0.5).is_err());
    }

    #[test]
    fn d_keeps_constants_and_kills_high_sinusoids() {
        let op = DegradationOp::new(8, 8, 2.0).unwrap();
        let c = Tensor::full(&[1, 8, 8, 2], 0.3);
        assert!(apply_d(&c, &op).unwrap().max_abs_diff(&c).unwrap() < 1e-14);
        // cos(2π·3x/8) has |v| = 3 > cutoff 2
        let hf = Tensor::new(
            &[1, 8, 8, 1],
            (0..64)
                .map(|p| (2.0 * std::f64::consts::PI * 3.0 * (p % 8) as f64 / 8.0).cos())
                .collect(),
        )
        .unwrap();
        assert!(apply_d(&hf, &op).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn d_is_idempotent_and_self_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let op = DegradationOp::new(9, 6, 1.7).unwrap();
        let x = Tensor::randn(&[2, 9, 6, 3], 1.0, &mut rng);
        let y = Tensor::randn(&[2, 9, 6, 3], 1.0, &mut rng);
        let dx = op.apply(&x).unwrap();
        assert!(op.apply(&dx).unwrap().max_abs_diff(&dx).unwrap() < 1e-10);
        let lhs = dx.mul(&y).unwrap().sum();
        let rhs = x.mul(&op.apply(&y).unwrap()).unwrap().sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn moments_at_zero_and_ln4() {
        let s = DiffusionSchedule::default();
        let op = toy_op();
        let m = conditional_moments(0.0, &s, &op).unwrap();
        assert!(m.mean.iter().all(|&v| v == 1.0));
        assert!(m.var.iter().all(|&v| v == 0.0));
        // B(t) = ln 4: 0.1 t + 9.95 t^2 = ln 4
        let t = (-0.1 + (0.01 + 4.0 * 9.95 * 4f64.ln()).sqrt()) / (2.0 * 9.95);
        assert!((s.beta_integral(t) - 4f64.ln()).abs() < 1e-12);
        let m = conditional_moments(t, &s, &op).unwrap();
        let hp = (0..16).find(|&p| !op.is_low(p)).unwrap();
        assert!((m.mean[hp] - 0.5).abs() < 1e-12);
        assert!((m.var[hp] - 0.75).abs() < 1e-12);
        let lp = (0..16).find(|&p| op.is_low(p)).unwrap();
        assert_eq!(m.mean[lp], 1.0);
    }

    #[test]
    fn moments_monotone_in_time() {
        let s = DiffusionSchedule::default();
        let op = DegradationOp::new(6, 6, 2.0).unwrap();
        let mut prev = conditional_moments(0.0, &s, &op).unwrap();
        for k in 1..=50 {
            let cur = conditional_moments(k as f64 / 50.0, &s, &op).unwrap();
            for p in 0..36 {
                assert!(cur.var[p] >= prev.var[p]);
                if op.is_low(p) {
                    assert_eq!(cur.mean[p], 1.0);
                } else {
                    assert!(cur.mean[p] <= prev.mean[p]);
                }
            }
            prev = cur;
        }
    }

    #[test]
    fn sample_at_zero_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = DiffusionSchedule::default();
        let op = toy_op();
        let x0 = Tensor::randn(&[1, 4, 4, 1], 1.0, &mut rng);
        assert_eq!(sample_xt(&x0, 0.0, &s, &op, &mut rng).unwrap(), x0);
    }

    #[test]
    fn score_at_mean_is_zero_and_floor_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = DiffusionSchedule::default();
        let op = toy_op();
        let x0 = Tensor::randn(&[1, 4, 4, 1], 1.0, &mut rng);
        let mean = conditional_mean(&x0, 0.4, &s, &op).unwrap();
        let score = true_conditional_score(&mean, &x0, 0.4, &s, &op).unwrap();
        assert!(score.max_abs() < 1e-12);
        assert!(true_conditional_score(&mean, &x0, 1e-4, &s, &op).is_err());
    }

    #[test]
    fn single_mode_worked_example() {
        // One high-pass mode with m = 0.5, v = 0.75, x0_hat = 1, xt_hat = 1:
        // score_hat = -(1 - 0.5) / 0.75.
        let s = DiffusionSchedule::default();
        let t = (-0.1 + (0.01 + 4.0 * 9.95 * 4f64.ln()).sqrt()) / (2.0 * 9.95);
        // On a 2×2 grid at scale 2 only the DC mode is low-pass.
        let op = DegradationOp::new(2, 2, 2.0).unwrap();
        assert!(op.is_low(0) && !op.is_low(3));
        // pixel pattern whose only nonzero coefficient is mode (1,1) with value 1
        let basis = Tensor::new(&[1, 2, 2, 1], vec![0.25, -0.25, -0.25, 0.25]).unwrap();
        let score = true_conditional_score(&basis, &basis, t, &s, &op).unwrap();
        let expected = basis.scale(-(1.0 - 0.5) / 0.75);
        assert!(score.max_abs_diff(&expected).unwrap() < 1e-12);
        assert!((-(1.0 - 0.5) / 0.75f64 - (-0.666_666_666_666_666_6)).abs() < 1e-12);
    }

    #[test]
    fn degrade_shapes_and_identity() {
        let img = Image::new(128, 128, 3, vec![0.5; 128 * 128 * 3]).unwrap();
        let lr = degrade(&img, 4.0).unwrap();
        assert_eq!((lr.height(), lr.width()), (32, 32));
        assert!(lr.values().iter().all(|v| (v - 0.5).abs() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vals: Vec<f64> = (0..6 * 5).map(|_| rng.random::<f64>()).collect();
        let small = Image::new(6, 5, 1, vals).unwrap();
        let same = degrade(&small, 1.0).unwrap();
        for (a, b) in same.values().iter().zip(small.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(degrade(&small, 20.0).is_err());
    }
}
