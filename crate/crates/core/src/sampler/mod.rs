//! Deterministic reverse sampling with the probability-flow ODE.
//!
//! The drift is `f(x, t) − ½ β(t) s(x, t)` with `f(x, t) = −½ β(t)(x − D x)`,
//! integrated from `t = T` down to `0` over an adaptive time grid with RK4,
//! or with the embedded Dormand–Prince pair.
//!
//! [`fit_ats`] tunes the grid weights by matching a coarse RK4 trajectory to
//! a fine one. The objective is this crate's own construction; the grid
//! family itself is fixed by [`AtsParams`].

mod ats;
mod ode;

pub use ats::{build_time_grid, AtsParams, TimeGrid};
pub use ode::{rk45_integrate, rk4_step, Rk45Options, Rk45Stats};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffusion::{
    spectral_filter_var, structured_noise, true_conditional_score, DegradationOp,
    DiffusionSchedule, FilterKind, MomentFilter,
};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::nn::{score_net, Conditioning, ScoreNet};
use crate::par;
use crate::tensor::{bicubic_resize, Image, Tensor};

/// A score function usable both on plain values and on a recording tape.
pub trait ScoreModel: Sync {
    /// Whatever must be recorded once per tape before scores can be taken.
    type Bound;

    fn schedule(&self) -> &DiffusionSchedule;
    fn op(&self) -> &DegradationOp;
    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor>;
    fn bind(&self, tape: &mut Tape) -> Result<Self::Bound>;
    fn score_on_tape(&self, tape: &mut Tape, bound: &Self::Bound, x: Var, t: Var) -> Result<Var>;
}

/// The trained network conditioned on one low-resolution batch.
pub struct NetworkScore<'a> {
    pub model: &'a ModelParams,
    pub x_lr: Tensor,
    op: DegradationOp,
}

impl<'a> NetworkScore<'a> {
    pub fn new(model: &'a ModelParams, x_lr: Tensor, out_h: usize, out_w: usize) -> Result<Self> {
        let (_, h, w, _) = x_lr.dims4()?;
        let op = DegradationOp::between(h, w, out_h, out_w)?;
        Ok(NetworkScore { model, x_lr, op })
    }
}

impl ScoreModel for NetworkScore<'_> {
    type Bound = (ScoreNet<Var>, Conditioning);

    fn schedule(&self) -> &DiffusionSchedule {
        &self.model.schedule
    }

    fn op(&self) -> &DegradationOp {
        &self.op
    }

    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape)?;
        let xv = tape.constant(x.clone());
        let tv = tape.constant(Tensor::scalar(t));
        let s = self.score_on_tape(&mut tape, &bound, xv, tv)?;
        Ok(tape.value(s).clone())
    }

    fn bind(&self, tape: &mut Tape) -> Result<Self::Bound> {
        let net = self.model.net.try_map(&mut |_, t| Ok(tape.constant(t.clone())))?;
        let cond = Conditioning::record(
            tape,
            &self.x_lr,
            self.op.height(),
            self.op.width(),
            self.model.schedule,
        )?;
        Ok((net, cond))
    }

    fn score_on_tape(&self, tape: &mut Tape, bound: &Self::Bound, x: Var, t: Var) -> Result<Var> {
        score_net(tape, &self.model.config, &bound.0, x, t, &bound.1)
    }
}

/// The exact score of `p_t(x | x0)` for a known clean image `x0`.
#[derive(Clone, Debug)]
pub struct GaussianOracleScore {
    pub x0: Tensor,
    pub schedule: DiffusionSchedule,
    pub op: DegradationOp,
}

impl ScoreModel for GaussianOracleScore {
    type Bound = Var;

    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn op(&self) -> &DegradationOp {
        &self.op
    }

    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        true_conditional_score(x, &self.x0, t, &self.schedule, &self.op)
    }

    fn bind(&self, tape: &mut Tape) -> Result<Var> {
        Ok(tape.constant(self.x0.clone()))
    }

    fn score_on_tape(&self, tape: &mut Tape, x0: &Var, x: Var, t: Var) -> Result<Var> {
        let inv = MomentFilter::new(FilterKind::InvVar, self.schedule, self.op.clone());
        let mov = MomentFilter::new(FilterKind::MeanOverVar, self.schedule, self.op.clone());
        let a = spectral_filter_var(tape, x, t, &inv)?;
        let b = spectral_filter_var(tape, *x0, t, &mov)?;
        tape.sub(b, a)
    }
}

/// Which forward drift the probability-flow ODE is built on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftForm {
    /// `−½ β(t)(x − D x)`, consistent with the forward process.
    #[default]
    HighPass,
    /// `−½ β(t) x`, the plain variance-preserving drift.
    Full,
}

/// `−½ β(t) (f̃(x) + s(x, max(t, t_floor)))` where `f̃` is the high-pass
/// part of `x` or `x` itself.
pub fn reverse_drift<S: ScoreModel + ?Sized>(
    x: &Tensor,
    t: f64,
    score: &S,
    form: DriftForm,
) -> Result<Tensor> {
    let schedule = score.schedule();
    let beta = schedule.beta(t)?;
    let s = score.score(x, t.max(schedule.t_floor()))?;
    let f = match form {
        DriftForm::HighPass => x.sub(&score.op().apply(x)?)?,
        DriftForm::Full => x.clone(),
    };
    let d = f.add(&s)?.scale(-0.5 * beta);
    if !d.is_finite() {
        return Err(Error::NonFinite {
            what: format!("reverse drift at t = {t}"),
        });
    }
    Ok(d)
}

/// [`reverse_drift`] recorded on a tape, differentiable in `x` and `t`.
pub fn reverse_drift_on_tape<S: ScoreModel + ?Sized>(
    tape: &mut Tape,
    score: &S,
    bound: &S::Bound,
    x: Var,
    t: Var,
    form: DriftForm,
) -> Result<Var> {
    let schedule = *score.schedule();
    let slope = (schedule.beta_max - schedule.beta_min) / schedule.horizon;
    let beta = tape.affine(t, slope, schedule.beta_min);
    let tc = tape.max_const(t, schedule.t_floor());
    let s = score.score_on_tape(tape, bound, x, tc)?;
    let f = match form {
        DriftForm::HighPass => {
            let low = tape.low_pass(x, score.op())?;
            tape.sub(x, low)?
        }
        DriftForm::Full => x,
    };
    let sum = tape.add(f, s)?;
    let factor = tape.scale(beta, -0.5);
    tape.mul_scalar(factor, sum)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMode {
    #[default]
    Rk4Grid,
    Rk45,
}

impl std::str::FromStr for SolverMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rk4-grid" => Ok(SolverMode::Rk4Grid),
            "rk45" => Ok(SolverMode::Rk45),
            other => Err(Error::invalid(format!(
                "unknown solver mode {other:?} (expected rk4-grid or rk45)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerOptions {
    pub steps: usize,
    pub mode: SolverMode,
    pub drift: DriftForm,
    /// Add structured noise to the initial state.
    pub noise: bool,
    #[serde(skip)]
    pub rk45: Rk45Options,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            steps: 30,
            mode: SolverMode::Rk4Grid,
            drift: DriftForm::HighPass,
            noise: true,
            rk45: Rk45Options::default(),
        }
    }
}

/// Run report written next to sampled images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub steps: usize,
    pub mode: SolverMode,
    pub wall_ms: f64,
    pub nfe: usize,
    pub grid: Vec<f64>,
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { what } => Error::NonFinite {
            what: format!("{what} (solver step {step})"),
        },
        other => other,
    }
}

/// Integrate the probability-flow ODE from `T` to `0` starting at `x_start`.
pub fn sample_tensor<S: ScoreModel + ?Sized>(
    score: &S,
    x_start: &Tensor,
    ats: &AtsParams,
    opts: &SamplerOptions,
) -> Result<(Tensor, SampleReport)> {
    let clock = Instant::now();
    let horizon = score.schedule().horizon;
    let mut nfe = 0usize;
    let mut drift = |x: &Tensor, t: f64| {
        nfe += 1;
        reverse_drift(x, t, score, opts.drift)
    };
    let (x, steps, grid) = match opts.mode {
        SolverMode::Rk4Grid => {
            let grid = build_time_grid(opts.steps, &AtsParams::new(ats.omega.clone(), horizon)?)?;
            let n = grid.steps();
            let mut x = x_start.clone();
            for i in 0..n {
                let t = grid.times[n - i];
                let h = grid.times[n - i - 1] - t;
                x = rk4_step(&x, t, h, &mut drift).map_err(|e| at_step(e, i))?;
            }
            (x, n, grid.times)
        }
        SolverMode::Rk45 => {
            let (x, stats) = rk45_integrate(x_start, horizon, 0.0, &mut drift, &opts.rk45)?;
            (x, stats.accepted, stats.times)
        }
    };
    Ok((
        x,
        SampleReport {
            steps,
            mode: opts.mode,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            nfe,
            grid,
        },
    ))
}

/// Output extent for an input extent and scale: `round(n · s)`.
pub fn hr_extent(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

/// Super-resolve `x_lr` by `scale` with the trained network.
pub fn sample(
    model: &ModelParams,
    x_lr: &Image,
    scale: f64,
    ats: &AtsParams,
    opts: &SamplerOptions,
    seed: u64,
) -> Result<(Image, SampleReport)> {
    if !(scale >= 1.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be >= 1, got {scale}")));
    }
    let clock = Instant::now();
    let lr = x_lr.to_rgb().to_tensor();
    let (oh, ow) = (hr_extent(x_lr.height(), scale), hr_extent(x_lr.width(), scale));
    let score = NetworkScore::new(model, lr.clone(), oh, ow)?;
    let mut x = bicubic_resize(&lr, oh, ow)?;
    if opts.noise {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon = model.schedule.horizon;
        let eps = structured_noise(x.shape(), horizon, &model.schedule, score.op(), &mut rng)?;
        x = x.add(&eps)?;
    }
    let (out, mut report) = sample_tensor(&score, &x, ats, opts)?;
    report.wall_ms = clock.elapsed().as_secs_f64() * 1e3;
    Ok((Image::from_tensor(&out.clamp(0.0, 1.0))?, report))
}

/// One trajectory used by [`fit_ats`]: a score model and its start state at `T`.
pub struct AtsProblem<S> {
    pub score: S,
    pub x_start: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtsFitOptions {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub iterations: usize,
    /// Initial length of the normalized descent step in `ψ = e^ω` space.
    pub step: f64,
    pub drift: DriftForm,
}

impl Default for AtsFitOptions {
    fn default() -> Self {
        AtsFitOptions {
            n_coarse: 30,
            n_fine: 256,
            iterations: 20,
            step: 0.5,
            drift: DriftForm::HighPass,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtsFitReport {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    pub accepted: usize,
    /// Objective after every iteration, starting with the initial value.
    pub history: Vec<f64>,
    pub omega: Vec<f64>,
}

/// RK4 from `T` to `0` over the grid held in `times` (length `n + 1`).
fn rk4_on_tape<S: ScoreModel + ?Sized>(
    tape: &mut Tape,
    score: &S,
    bound: &S::Bound,
    x_start: Var,
    times: Var,
    n: usize,
    form: DriftForm,
) -> Result<Var> {
    let mut x = x_start;
    for i in 0..n {
        let t = tape.select(times, n - i)?;
        let t_next = tape.select(times, n - i - 1)?;
        let h = tape.sub(t_next, t)?;
        let half = tape.scale(h, 0.5);
        let sixth = tape.scale(h, 1.0 / 6.0);
        let t_mid = tape.add(t, half)?;

        let k1 = reverse_drift_on_tape(tape, score, bound, x, t, form)?;
        let d = tape.mul_scalar(half, k1)?;
        let x2 = tape.add(x, d)?;
        let k2 = reverse_drift_on_tape(tape, score, bound, x2, t_mid, form)?;
        let d = tape.mul_scalar(half, k2)?;
        let x3 = tape.add(x, d)?;
        let k3 = reverse_drift_on_tape(tape, score, bound, x3, t_mid, form)?;
        let d = tape.mul_scalar(h, k3)?;
        let x4 = tape.add(x, d)?;
        let k4 = reverse_drift_on_tape(tape, score, bound, x4, t_next, form)?;

        let k23 = tape.add(k2, k3)?;
        let k23 = tape.scale(k23, 2.0);
        let acc = tape.add(k1, k23)?;
        let acc = tape.add(acc, k4)?;
        let d = tape.mul_scalar(sixth, acc)?;
        x = tape.add(x, d)?;
        if !tape.value(x).is_finite() {
            return Err(Error::NonFinite {
                what: format!("ATS trajectory state (solver step {i})"),
            });
        }
    }
    Ok(x)
}

fn problem_objective<S: ScoreModel>(
    p: &AtsProblem<S>,
    omega: &[f64],
    opts: &AtsFitOptions,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let horizon = p.score.schedule().horizon;

    // reference: same code path without recording, on the fine grid
    let mut rt = Tape::no_grad();
    let rb = p.score.bind(&mut rt)?;
    let ro = rt.constant(Tensor::from_vec(omega.to_vec()));
    let rg = rt.time_grid(ro, opts.n_fine, horizon)?;
    let rx = rt.constant(p.x_start.clone());
    let r = rk4_on_tape(&mut rt, &p.score, &rb, rx, rg, opts.n_fine, opts.drift)?;
    let reference = rt.value(r).clone();
    drop(rt);

    let mut tape = if with_grad { Tape::new() } else { Tape::no_grad() };
    let b = p.score.bind(&mut tape)?;
    let o = tape.param(Tensor::from_vec(omega.to_vec()));
    let g = tape.time_grid(o, opts.n_coarse, horizon)?;
    let x = tape.constant(p.x_start.clone());
    let y = rk4_on_tape(&mut tape, &p.score, &b, x, g, opts.n_coarse, opts.drift)?;
    let target = tape.constant(reference);
    let loss = tape.mse(y, target)?;
    let value = tape.value(loss).data()[0];
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, grads.get_or_zeros(o, &Tensor::zeros(&[omega.len()])).into_data()))
}

/// Mean over problems of the squared coarse-vs-fine terminal mismatch, and
/// (optionally) its gradient with respect to `ω`.
pub fn ats_objective<S: ScoreModel>(
    problems: &[AtsProblem<S>],
    ats: &AtsParams,
    opts: &AtsFitOptions,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    if problems.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if opts.n_coarse == 0 || opts.n_fine == 0 {
        return Err(Error::invalid("ATS fitting needs positive step counts"));
    }
    let parts = par::map_slice(problems, |p| problem_objective(p, &ats.omega, opts, with_grad));
    let n = problems.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; ats.k()];
    for part in parts {
        let (v, g) = part?;
        value += v / n;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b / n;
        }
    }
    Ok((value, grad))
}

/// Smallest basis weight `ψ_k = e^{ω_k}` a fitting step can produce.
const PSI_FLOOR: f64 = 4.248354255291589e-18; // e^{-40}

/// Descend on [`ats_objective`] from `ats`, accepting only steps that lower
/// the objective (the step length halves on rejection and grows by half on
/// acceptance). The result is never worse than the starting point.
///
/// Steps are taken on the basis weights `ψ = e^{ω}` (normalized so the
/// largest is 1) along the normalized gradient `∂/∂ψ_k = e^{−ω_k} ∂/∂ω_k`,
/// so weights at the `−40` floor can still grow.
pub fn fit_ats<S: ScoreModel>(
    problems: &[AtsProblem<S>],
    ats: &AtsParams,
    opts: &AtsFitOptions,
) -> Result<(AtsParams, AtsFitReport)> {
    ats.validate()?;
    let (mut f, mut g) = ats_objective(problems, ats, opts, true)?;
    let mut current = ats.clone();
    let mut report = AtsFitReport {
        initial_objective: f,
        final_objective: f,
        iterations: 0,
        accepted: 0,
        history: vec![f],
        omega: current.omega.clone(),
    };
    let mut step = opts.step;
    for _ in 0..opts.iterations {
        report.iterations += 1;
        let psi = current.psi();
        let gp: Vec<f64> = g.iter().zip(&psi).map(|(d, p)| d / p).collect();
        let norm = gp.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            break;
        }
        let omega: Vec<f64> = psi
            .iter()
            .zip(&gp)
            .map(|(p, d)| (p - step * d / norm).max(PSI_FLOOR).ln())
            .collect();
        let trial = AtsParams::new(omega, current.horizon)?;
        match ats_objective(problems, &trial, opts, true) {
            Ok((ft, gt)) if ft < f => {
                current = trial;
                f = ft;
                g = gt;
                report.accepted += 1;
                step *= 1.5;
            }
            // a rejected or degenerate trial grid only shortens the step
            _ => step *= 0.5,
        }
        report.history.push(f);
    }
    report.final_objective = f;
    report.omega = current.omega.clone();
    Ok((current, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::conditional_mean;
    use rand::SeedableRng;

    fn toy() -> GaussianOracleScore {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        GaussianOracleScore {
            x0: Tensor::rand_uniform(&[1, 4, 4, 1], 0.0, 1.0, &mut rng),
            schedule: DiffusionSchedule::default(),
            op: DegradationOp::new(4, 4, 2.0).unwrap(),
        }
    }

    struct Zero(DiffusionSchedule, DegradationOp);

    impl ScoreModel for Zero {
        type Bound = ();
        fn schedule(&self) -> &DiffusionSchedule {
            &self.0
        }
        fn op(&self) -> &DegradationOp {
            &self.1
        }
        fn score(&self, x: &Tensor, _: f64) -> Result<Tensor> {
            Ok(Tensor::zeros(x.shape()))
        }
        fn bind(&self, _: &mut Tape) -> Result<()> {
            Ok(())
        }
        fn score_on_tape(&self, tape: &mut Tape, _: &(), x: Var, _: Var) -> Result<Var> {
            Ok(tape.scale(x, 0.0))
        }
    }

    #[test]
    fn zero_score_drift_cases() {
        let o = toy();
        let z = Zero(o.schedule, o.op.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 4, 4, 1], 1.0, &mut rng);
        let low = o.op.apply(&x).unwrap();
        let high = x.sub(&low).unwrap();
        let d = reverse_drift(&low, 0.5, &z, DriftForm::HighPass).unwrap();
        assert!(d.max_abs() < 1e-12);
        let d = reverse_drift(&high, 0.5, &z, DriftForm::HighPass).unwrap();
        let beta = o.schedule.beta(0.5).unwrap();
        assert!(d.max_abs_diff(&high.scale(-0.5 * beta)).unwrap() < 1e-12);
        let d = reverse_drift(&x, 0.5, &z, DriftForm::Full).unwrap();
        assert!(d.max_abs_diff(&x.scale(-0.5 * beta)).unwrap() < 1e-12);
    }

    #[test]
    fn tape_drift_matches_value_drift() {
        let o = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 4, 4, 1], 1.0, &mut rng);
        for t in [0.0, 0.3, 1.0] {
            let want = reverse_drift(&x, t, &o, DriftForm::HighPass).unwrap();
            let mut tape = Tape::no_grad();
            let b = o.bind(&mut tape).unwrap();
            let xv = tape.constant(x.clone());
            let tv = tape.constant(Tensor::scalar(t));
            let d = reverse_drift_on_tape(&mut tape, &o, &b, xv, tv, DriftForm::HighPass).unwrap();
            assert!(tape.value(d).max_abs_diff(&want).unwrap() < 1e-9 * (1.0 + want.max_abs()));
        }
    }

    #[test]
    fn noise_free_start_follows_the_mean() {
        let o = toy();
        let start = conditional_mean(&o.x0, 1.0, &o.schedule, &o.op).unwrap();
        let opts = SamplerOptions {
            steps: 64,
            ..SamplerOptions::default()
        };
        let (x, rep) = sample_tensor(&o, &start, &AtsParams::default(), &opts).unwrap();
        assert_eq!(rep.nfe, 4 * 64);
        assert!(x.max_abs_diff(&o.x0).unwrap() < 1e-3);
    }

    #[test]
    fn equal_resolutions_give_zero_objective() {
        let o = toy();
        let start = conditional_mean(&o.x0, 1.0, &o.schedule, &o.op).unwrap();
        let problems = vec![AtsProblem { score: o, x_start: start }];
        let opts = AtsFitOptions {
            n_coarse: 6,
            n_fine: 6,
            ..AtsFitOptions::default()
        };
        for omega in [vec![0.0, -40.0, -40.0], vec![0.3, -1.0, 0.7]] {
            let a = AtsParams::new(omega, 1.0).unwrap();
            assert_eq!(ats_objective(&problems, &a, &opts, false).unwrap().0, 0.0);
        }
    }

    #[test]
    fn objective_gradient_matches_difference() {
        let o = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = structured_noise(&[1, 4, 4, 1], 1.0, &o.schedule, &o.op, &mut rng).unwrap();
        let start = conditional_mean(&o.x0, 1.0, &o.schedule, &o.op)
            .unwrap()
            .add(&noise)
            .unwrap();
        let problems = vec![AtsProblem { score: o, x_start: start }];
        let opts = AtsFitOptions {
            n_coarse: 4,
            n_fine: 32,
            ..AtsFitOptions::default()
        };
        let omega = vec![0.2, -0.4, 0.1];
        let a = AtsParams::new(omega.clone(), 1.0).unwrap();
        let (_, g) = ats_objective(&problems, &a, &opts, true).unwrap();
        for k in 0..3 {
            // the reference moves with ω too, so difference the coarse part only
            let f = |d: f64| {
                let mut w = omega.clone();
                w[k] += d;
                let a = AtsParams::new(w, 1.0).unwrap();
                let p = &problems[0];
                let grid = build_time_grid(4, &a).unwrap();
                let mut x = p.x_start.clone();
                let mut drift = |x: &Tensor, t: f64| reverse_drift(x, t, &p.score, DriftForm::HighPass);
                for i in 0..4 {
                    x = rk4_step(&x, grid.times[4 - i], grid.times[3 - i] - grid.times[4 - i], &mut drift)
                        .unwrap();
                }
                x
            };
            let fine = {
                let p = &problems[0];
                let grid = build_time_grid(32, &a).unwrap();
                let mut x = p.x_start.clone();
                let mut drift = |x: &Tensor, t: f64| reverse_drift(x, t, &p.score, DriftForm::HighPass);
                for i in 0..32 {
                    x = rk4_step(&x, grid.times[32 - i], grid.times[31 - i] - grid.times[32 - i], &mut drift)
                        .unwrap();
                }
                x
            };
            let obj = |d: f64| {
                let y = f(d);
                y.sub(&fine).unwrap().sum_sq() / y.len() as f64
            };
            let h = 1e-5;
            let fd = (obj(h) - obj(-h)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-5 * (1.0 + g[k].abs()), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn fitting_never_worsens_the_objective() {
        let o = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = structured_noise(&[1, 4, 4, 1], 1.0, &o.schedule, &o.op, &mut rng).unwrap();
        let start = conditional_mean(&o.x0, 1.0, &o.schedule, &o.op)
            .unwrap()
            .add(&noise)
            .unwrap();
        let problems = vec![AtsProblem { score: o, x_start: start }];
        let opts = AtsFitOptions {
            n_coarse: 5,
            n_fine: 64,
            iterations: 8,
            ..AtsFitOptions::default()
        };
        let (fitted, rep) = fit_ats(&problems, &AtsParams::default(), &opts).unwrap();
        assert!(rep.final_objective <= rep.initial_objective);
        assert!(rep.history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(fitted.omega, rep.omega);
    }

    #[test]
    fn mode_names_parse() {
        assert_eq!("rk45".parse::<SolverMode>().unwrap(), SolverMode::Rk45);
        assert_eq!("rk4-grid".parse::<SolverMode>().unwrap(), SolverMode::Rk4Grid);
        assert!("euler".parse::<SolverMode>().is_err());
        assert_eq!(hr_extent(16, 2.5), 40);
    }
}
