use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wfno_core::diffusion::{conditional_mean, structured_noise, DegradationOp, DiffusionSchedule};
use wfno_core::sampler::{
    build_time_grid, fit_ats, reverse_drift, rk45_integrate, rk4_step, sample_tensor, AtsFitOptions, AtsParams,
    AtsProblem, DriftForm, GaussianOracleScore, Rk45Options, SamplerOptions, SolverMode, TimeGrid,
};
use wfno_core::Tensor;

fn decay(x: &Tensor, _t: f64) -> wfno_core::Result<Tensor> {
    Ok(x.scale(-1.0))
}

fn rk4_decay_error(n: usize) -> f64 {
    let mut x = Tensor::scalar(1.0);
    let h = 1.0 / n as f64;
    for i in 0..n {
        x = rk4_step(&x, i as f64 * h, h, &mut decay).unwrap();
    }
    (x.data()[0] - (-1f64).exp()).abs()
}

#[test]
fn rk4_is_fourth_order() {
    let errs: Vec<f64> = [8, 16, 32, 64].iter().map(|&n| rk4_decay_error(n)).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio} from {errs:?}");
    }
}

#[test]
fn rk45_meets_its_tolerance() {
    let opts = Rk45Options::default();
    assert_eq!((opts.atol, opts.rtol, opts.h0, opts.h_min), (1e-6, 1e-6, 1e-2, 1e-4));
    let (x, stats) = rk45_integrate(&Tensor::scalar(1.0), 0.0, 1.0, &mut decay, &opts).unwrap();
    assert!((x.data()[0] - (-1f64).exp()).abs() <= 1e-6);
    assert_eq!(*stats.times.last().unwrap(), 1.0);
    // backwards in time the solution grows by e; local control keeps the global error at tolerance scale
    let (x, _) = rk45_integrate(&Tensor::scalar((-1f64).exp()), 1.0, 0.0, &mut decay, &opts).unwrap();
    assert!((x.data()[0] - 1.0).abs() <= 1e-5);
}

#[test]
fn tighter_rk45_tolerance_never_hurts() {
    let mut last = f64::INFINITY;
    for tol in [1e-3, 1e-5, 1e-7, 1e-9] {
        let opts = Rk45Options {
            atol: tol,
            rtol: tol,
            ..Rk45Options::default()
        };
        let (x, _) = rk45_integrate(&Tensor::scalar(1.0), 0.0, 2.0, &mut decay, &opts).unwrap();
        let err = (x.data()[0] - (-2f64).exp()).abs();
        assert!(err <= last, "tol {tol}: {err} > {last}");
        last = err;
    }
}

#[test]
fn grids_are_monotone_with_exact_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let k = rng.random_range(1..=4);
        let omega: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let horizon = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.5..2.0) };
        let ats = AtsParams::new(omega, horizon).unwrap();
        let n = rng.random_range(1..=60);
        let g = build_time_grid(n, &ats).unwrap();
        assert_eq!(g.times.len(), n + 1);
        assert_eq!(g.times[0], 0.0);
        assert_eq!(g.times[n], horizon);
        assert!(g.times.windows(2).all(|w| w[0] < w[1]));
        for (i, &t) in g.times.iter().enumerate() {
            assert!((ats.phi(t) - i as f64 / n as f64).abs() <= 1e-12);
        }
        for _ in 0..10 {
            let t = rng.random_range(0.0..horizon);
            let back = ats.phi_inverse(ats.phi(t)).unwrap();
            assert!((ats.phi(back) - ats.phi(t)).abs() <= 1e-12);
            assert!((back - t).abs() <= 1e-9 * horizon);
        }
    }
}

#[test]
fn single_basis_weight_gives_uniform_grid() {
    for &omega in &[0.0, -2.5, 7.0] {
        for n in [1, 3, 10, 30] {
            let g = build_time_grid(n, &AtsParams::new(vec![omega], 1.0).unwrap()).unwrap();
            let uniform: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
            assert_eq!(g.times, uniform);
        }
    }
    assert_eq!(TimeGrid::uniform(5, 1.0).unwrap().steps(), 5);
}

#[test]
fn cube_root_grid_point() {
    // only the cubic basis survives: t_1 = φ⁻¹(1/2) = 2^{-1/3}
    let g = build_time_grid(2, &AtsParams::new(vec![-40.0, -40.0, 0.0], 1.0).unwrap()).unwrap();
    assert!((g.times[1] - 0.793701).abs() <= 1e-6);
    assert!((g.times[1] - 0.5f64.powf(1.0 / 3.0)).abs() <= 1e-9);
}

fn toy() -> GaussianOracleScore {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    GaussianOracleScore {
        x0: Tensor::rand_uniform(&[1, 4, 4, 1], 0.0, 1.0, &mut rng),
        schedule: DiffusionSchedule::default(),
        op: DegradationOp::new(4, 4, 2.0).unwrap(),
    }
}

#[test]
fn oracle_flow_tracks_the_conditional_mean() {
    let o = toy();
    let grid = build_time_grid(256, &AtsParams::default()).unwrap();
    let mut x = conditional_mean(&o.x0, 1.0, &o.schedule, &o.op).unwrap();
    let mut drift = |x: &Tensor, t: f64| reverse_drift(x, t, &o, DriftForm::HighPass);
    let mut worst: f64 = 0.0;
    for i in (0..256).rev() {
        let (t, t_next) = (grid.times[i + 1], grid.times[i]);
        x = rk4_step(&x, t, t_next - t, &mut drift).unwrap();
        let mean = conditional_mean(&o.x0, t_next, &o.schedule, &o.op).unwrap();
        worst = worst.max(x.max_abs_diff(&mean).unwrap());
    }
    assert!(worst <= 1e-3, "max deviation {worst}");
}

#[test]
fn terminal_error_falls_as_steps_grow() {
    let o = toy();
    let start = conditional_mean(&o.x0, 1.0, &o.schedule, &o.op).unwrap();
    let errs: Vec<f64> = [5, 10, 20, 40, 80]
        .iter()
        .map(|&n| {
            let opts = SamplerOptions {
                steps: n,
                ..SamplerOptions::default()
            };
            let (x, rep) = sample_tensor(&o, &start, &AtsParams::default(), &opts).unwrap();
            assert_eq!(rep.nfe, 4 * n);
            x.max_abs_diff(&o.x0).unwrap()
        })
        .collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
}

#[test]
fn noisy_start_converges_to_the_clean_image() {
    let o = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mean = conditional_mean(&o.x0, 1.0, &o.schedule, &o.op).unwrap();
    let eps = structured_noise(mean.shape(), 1.0, &o.schedule, &o.op, &mut rng).unwrap();
    let start = mean.add(&eps).unwrap();
    let opts = SamplerOptions {
        steps: 200,
        ..SamplerOptions::default()
    };
    let (x, _) = sample_tensor(&o, &start, &AtsParams::default(), &opts).unwrap();
    let before = start.max_abs_diff(&o.x0).unwrap();
    let after = x.max_abs_diff(&o.x0).unwrap();
    assert!(after < 0.1 * before, "{after} vs {before}");
}

#[test]
fn rk45_mode_reports_its_work() {
    let o = toy();
    let start = conditional_mean(&o.x0, 1.0, &o.schedule, &o.op).unwrap();
    let opts = SamplerOptions {
        mode: SolverMode::Rk45,
        ..SamplerOptions::default()
    };
    let (x, rep) = sample_tensor(&o, &start, &AtsParams::default(), &opts).unwrap();
    assert_eq!(rep.grid.first(), Some(&1.0));
    assert_eq!(rep.grid.last(), Some(&0.0));
    assert_eq!(rep.steps + 1, rep.grid.len());
    assert!(rep.nfe >= 6 * rep.steps);
    assert!(x.max_abs_diff(&o.x0).unwrap() < 1e-2);
}

#[test]
fn sampling_is_deterministic() {
    let o = toy();
    let start = conditional_mean(&o.x0, 1.0, &o.schedule, &o.op).unwrap();
    let opts = SamplerOptions::default();
    let (a, _) = sample_tensor(&o, &start, &AtsParams::default(), &opts).unwrap();
    let (b, _) = sample_tensor(&o, &start, &AtsParams::default(), &opts).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn fitting_recovers_from_a_poor_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let problems: Vec<_> = (0..3)
        .map(|_| {
            let o = toy();
            let mean = conditional_mean(&o.x0, 1.0, &o.schedule, &o.op).unwrap();
            let eps = structured_noise(mean.shape(), 1.0, &o.schedule, &o.op, &mut rng).unwrap();
            AtsProblem {
                x_start: mean.add(&eps).unwrap(),
                score: o,
            }
        })
        .collect();
    let opts = AtsFitOptions {
        n_coarse: 6,
        n_fine: 96,
        iterations: 12,
        ..AtsFitOptions::default()
    };
    // equal weights crowd the coarse steps towards T
    let poor = AtsParams::new(vec![0.0, 0.0, 0.0], 1.0).unwrap();
    let (fitted, report) = fit_ats(&problems, &poor, &opts).unwrap();
    assert!(report.final_objective < 0.1 * report.initial_objective, "{report:?}");
    assert!(report.history.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(report.omega, fitted.omega);
    // on this toy the uniform grid is already the best member of the family
    let (_, from_uniform) = fit_ats(&problems, &AtsParams::default(), &opts).unwrap();
    assert!(from_uniform.final_objective <= from_uniform.initial_objective);
    assert!(report.final_objective >= from_uniform.final_objective * (1.0 - 1e-9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn phi_round_trips(w0 in -5.0f64..5.0, w1 in -5.0f64..5.0, w2 in -5.0f64..5.0, s in 0.0f64..=1.0) {
        let ats = AtsParams::new(vec![w0, w1, w2], 1.0).unwrap();
        let t = ats.phi_inverse(s).unwrap();
        prop_assert!((0.0..=1.0).contains(&t));
        prop_assert!((ats.phi(t) - s).abs() <= 1e-12);
    }
}
