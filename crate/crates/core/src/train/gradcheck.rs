//! Central finite-difference checks of every layer's reverse-mode gradients.
//!
//! Each check records `L = Σ y ⊙ p` for a random probe `p`, then compares
//! `∂L/∂x_k` from the tape with `(L(x + h e_k) − L(x − h e_k)) / 2h` over
//! up to [`MAX_COORDS`] evenly spaced coordinates of every input. The
//! error measure is `|a − f| / max(|a|, |f|, 10⁻²)`, so the `10⁻⁴` relative
//! bound becomes a `10⁻⁶` absolute bound for small gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffusion::{spectral_filter_var, DiffusionSchedule, DegradationOp, FilterKind, MomentFilter};
use crate::error::Result;
use crate::nn::{
    score_net, AttnLayerParams, Conditioning, Conv, FnoLayerParams, FusionParams, NormParams,
    ScoreNet, ScoreNetConfig, SpectralParams, TimeEmbeddingConfig,
};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const MAX_COORDS: usize = 64;
const SCALE_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub layer: String,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Input name and flat index of the worst coordinate.
    pub worst: String,
    pub passed: bool,
}

/// One differentiable input: its name, value and finite-difference step.
struct Input {
    name: String,
    value: Tensor,
    step: f64,
}

fn input(name: impl Into<String>, value: Tensor) -> Input {
    Input {
        name: name.into(),
        value,
        step: FD_STEP,
    }
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

fn check<F>(layer: &str, seed: u64, inputs: Vec<Input>, f: F) -> Result<GradcheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|i| tape.param(i.value.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let probe = randn(tape.value(y).shape(), 1.0, &mut rng);
    let pv = tape.constant(probe.clone());
    let prod = tape.mul(y, pv)?;
    let loss = tape.sum(prod);
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let y = f(&mut t, &vs)?;
        Ok(t.value(y).mul(&probe)?.sum())
    };

    let mut values: Vec<Tensor> = inputs.iter().map(|i| i.value.clone()).collect();
    let mut checked = 0;
    let mut max_err: f64 = 0.0;
    let mut worst = String::new();
    for (i, inp) in inputs.iter().enumerate() {
        let an = grads.get_or_zeros(vars[i], &inp.value);
        let n = inp.value.len();
        let m = n.min(MAX_COORDS);
        for j in 0..m {
            let k = j * n / m;
            let orig = values[i].data()[k];
            values[i].data_mut()[k] = orig + inp.step;
            let up = eval(&values)?;
            values[i].data_mut()[k] = orig - inp.step;
            let down = eval(&values)?;
            values[i].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * inp.step);
            let a = an.data()[k];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(SCALE_FLOOR);
            if !(err <= max_err) {
                max_err = err;
                worst = format!("{}[{k}]", inp.name);
            }
            checked += 1;
        }
    }
    Ok(GradcheckResult {
        layer: layer.into(),
        seed,
        checked,
        max_rel_err: max_err,
        worst,
        passed: max_err <= REL_TOL,
    })
}

fn conv_params(v: &[Var], at: usize) -> Conv<Var> {
    Conv {
        weight: v[at],
        bias: v[at + 1],
    }
}

pub fn check_conv(seed: u64) -> Result<GradcheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        input("x", randn(&[2, 4, 4, 2], 1.0, &mut rng)),
        input("kernel", randn(&[3, 3, 2, 3], 0.5, &mut rng)),
        input("bias", randn(&[3], 0.5, &mut rng)),
    ];
    check("conv", seed, inputs, |t, v| t.conv2d(v[0], v[1], v[2]))
}

fn spectral_inputs(rng: &mut ChaCha8Rng, c: usize) -> Vec<Input> {
    vec![
        input("P_re", randn(&[4, 4, c, c], 0.5, rng)),
        input("P_im", randn(&[4, 4, c, c], 0.5, rng)),
        input("gamma", Tensor::scalar(rng.random_range(0.2..1.0))),
        input("alpha", Tensor::scalar(rng.random_range(0.5..1.0))),
    ]
}

pub fn check_spectral_conv(seed: u64) -> Result<GradcheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![input("v", randn(&[2, 4, 4, 2], 1.0, &mut rng))];
    inputs.extend(spectral_inputs(&mut rng, 2));
    check("spectral_conv", seed, inputs, |t, v| t.spectral_conv(v[0], v[1], v[2], v[3], v[4]))
}

pub fn check_fno_layer(seed: u64) -> Result<GradcheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![
        input("v", randn(&[2, 4, 4, 2], 1.0, &mut rng)),
        input("w_linear.weight", randn(&[1, 1, 2, 2], 0.7, &mut rng)),
        input("w_linear.bias", randn(&[2], 0.3, &mut rng)),
    ];
    inputs.extend(spectral_inputs(&mut rng, 2));
    check("wfno_layer", seed, inputs, |t, v| {
        let p = FnoLayerParams {
            w_linear: conv_params(v, 1),
            filter: SpectralParams {
                p_re: v[3],
                p_im: v[4],
                gamma: v[5],
                alpha: v[6],
            },
        };
        t.fno_layer(v[0], &p)
    })
}

pub fn check_spectral_upsample(seed: u64) -> Result<GradcheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![input("v", randn(&[2, 4, 4, 2], 1.0, &mut rng))];
    check("spectral_upsample", seed, inputs, |t, v| t.spectral_upsample(v[0], 7, 8))
}

pub fn check_attention(seed: u64) -> Result<GradcheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 2;
    let inputs = vec![
        input("v", randn(&[2, 4, 4, c], 1.0, &mut rng)),
        input("wq", randn(&[c, c], 0.7, &mut rng)),
        input("wk", randn(&[c, c], 0.7, &mut rng)),
        input("wv", randn(&[c, c], 0.7, &mut rng)),
        input("norm_k.scale", randn(&[c], 1.0, &mut rng)),
        input("norm_k.shift", randn(&[c], 0.3, &mut rng)),
        input("norm_v.scale", randn(&[c], 1.0, &mut rng)),
        input("norm_v.shift", randn(&[c], 0.3, &mut rng)),
        input("out.weight", randn(&[1, 1, c, c], 0.7, &mut rng)),
        input("out.bias", randn(&[c], 0.3, &mut rng)),
    ];
    check("galerkin_attention", seed, inputs, |t, v| {
        let p = AttnLayerParams {
            wq: v[1],
            wk: v[2],
            wv: v[3],
            norm_k: NormParams {
                scale: v[4],
                shift: v[5],
            },
            norm_v: NormParams {
                scale: v[6],
                shift: v[7],
            },
            out: conv_params(v, 8),
        };
        t.galerkin_attention(v[0], &p)
    })
}

pub fn check_fusion(seed: u64) -> Result<GradcheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        input("v_wfno", randn(&[2, 4, 4, 2], 1.0, &mut rng)),
        input("v_attn", randn(&[2, 4, 4, 2], 1.0, &mut rng)),
        input("gate.weight", randn(&[1, 1, 4, 1], 0.7, &mut rng)),
        input("gate.bias", randn(&[1], 0.3, &mut rng)),
    ];
    check("gated_fusion", seed, inputs, |t, v| {
        t.gated_fusion(v[0], v[1], &FusionParams { gate: conv_params(v, 2) })
    })
}

/// Embedding of `t` followed by the dense projection to channel biases.
/// The time coordinate is differenced with `h = 10⁻⁷`.
pub fn check_time_projection(seed: u64) -> Result<GradcheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TimeEmbeddingConfig::default();
    let inputs = vec![
        Input {
            name: "t".into(),
            value: Tensor::scalar(rng.random_range(0.05..1.0)),
            step: 1e-7,
        },
        input("time_proj.weight", randn(&[cfg.len(), 3], 0.1, &mut rng)),
        input("time_proj.bias", randn(&[3], 0.3, &mut rng)),
    ];
    check("time_projection", seed, inputs, move |t, v| {
        let e = t.time_embedding(v[0], &cfg)?;
        t.dense(e, v[1], v[2])
    })
}

pub fn check_moment_filter(seed: u64) -> Result<GradcheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let op = DegradationOp::new(4, 4, 2.0)?;
    let f = MomentFilter::new(FilterKind::MeanOverStd, DiffusionSchedule::default(), op);
    let inputs = vec![
        input("x", randn(&[2, 4, 4, 2], 1.0, &mut rng)),
        input("t", Tensor::scalar(rng.random_range(0.1..0.9))),
    ];
    check("moment_filter", seed, inputs, move |t, v| spectral_filter_var(t, v[0], v[1], &f))
}

/// Small configuration for the end-to-end network check.
pub fn tiny_config() -> ScoreNetConfig {
    ScoreNetConfig {
        channels: 3,
        encoder_blocks: 1,
        wfno_layers: 1,
        attn_layers: 1,
        modes_h: 4,
        modes_w: 4,
        learnable_alpha: true,
        time_embedding: TimeEmbeddingConfig {
            dim: 4,
            omega_min: 1.0,
            omega_max: 10.0,
        },
        ..ScoreNetConfig::default()
    }
}

/// The whole score network with respect to its state input and every parameter.
pub fn check_score_network(seed: u64) -> Result<GradcheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config();
    let mut net = ScoreNet::init(&cfg, &mut rng)?;
    // move γ, the skip weight and the output projection off their initial values
    net = net.try_map(&mut |name, t| {
        Ok(if name.ends_with("gamma") {
            Tensor::scalar(0.4)
        } else if name == "skip" {
            Tensor::scalar(0.7)
        } else if name.starts_with("proj") {
            randn(t.shape(), 0.5, &mut rng)
        } else {
            t.clone()
        })
    })?;
    let x_lr = Tensor::rand_uniform(&[1, 2, 2, 3], 0.0, 1.0, &mut rng);
    let t_val = rng.random_range(0.2..0.8);
    let schedule = DiffusionSchedule::default();
    let mut inputs = vec![input("x_t", randn(&[1, 4, 4, 3], 1.0, &mut rng))];
    for (n, t) in net.entries() {
        inputs.push(input(n, t));
    }
    check("score_network", seed, inputs, move |tape, v| {
        let mut k = 1;
        let p = net.try_map(&mut |_, _| {
            k += 1;
            Ok(v[k - 1])
        })?;
        let cond = Conditioning::record(tape, &x_lr, 4, 4, schedule)?;
        let tv = tape.constant(Tensor::scalar(t_val));
        score_net(tape, &cfg, &p, v[0], tv, &cond)
    })
}

pub type LayerCheck = fn(u64) -> Result<GradcheckResult>;

/// Every layer check, by name.
pub const LAYER_CHECKS: [(&str, LayerCheck); 9] = [
    ("conv", check_conv),
    ("spectral_conv", check_spectral_conv),
    ("wfno_layer", check_fno_layer),
    ("spectral_upsample", check_spectral_upsample),
    ("galerkin_attention", check_attention),
    ("gated_fusion", check_fusion),
    ("time_projection", check_time_projection),
    ("moment_filter", check_moment_filter),
    ("score_network", check_score_network),
];

/// Run every layer check for every seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::new();
    for &s in seeds {
        for (_, f) in LAYER_CHECKS {
            out.push(f(s)?);
        }
    }
    Ok(out)
}
