//! General-purpose differentiable operations.

use super::{BackCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::conv::{conv2d, conv2d_backward};
use crate::tensor::resize::ResizePlan;
use crate::tensor::Tensor;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
        + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn need(ctx: &BackCtx<'_>, k: usize) -> bool {
    ctx.needs[k]
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(
            "add",
            v,
            &[a, b],
            Box::new(|ctx| Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(
            "sub",
            v,
            &[a, b],
            Box::new(|ctx| Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.scale(-1.0))])),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(
            "mul",
            v,
            &[a, b],
            Box::new(|ctx| {
                Ok(vec![
                    need(ctx, 0).then(|| ctx.grad.mul(ctx.inputs[1])).transpose()?,
                    need(ctx, 1).then(|| ctx.grad.mul(ctx.inputs[0])).transpose()?,
                ])
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push("scale", v, &[a], Box::new(move |ctx| Ok(vec![Some(ctx.grad.scale(s))])))
    }

    /// `a * x + b` elementwise with constant coefficients.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let v = self.value(x).map(|t| a * t + b);
        self.push("affine", v, &[x], Box::new(move |ctx| Ok(vec![Some(ctx.grad.scale(a))])))
    }

    /// Elementwise `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn max_const(&mut self, x: Var, floor: f64) -> Var {
        let v = self.value(x).map(|t| t.max(floor));
        self.push(
            "max_const",
            v,
            &[x],
            Box::new(move |ctx| {
                Ok(vec![Some(ctx.inputs[0].zip_map(ctx.grad, |t, g| {
                    if t >= floor {
                        g
                    } else {
                        0.0
                    }
                })?)])
            }),
        )
    }

    /// Multiply tensor `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar expects a one-element scalar"));
        }
        let sv = self.value(s).data()[0];
        let v = self.value(x).scale(sv);
        Ok(self.push(
            "mul_scalar",
            v,
            &[s, x],
            Box::new(|ctx| {
                let sv = ctx.inputs[0].data()[0];
                let ds = need(ctx, 0).then(|| {
                    let d: f64 = ctx.grad.data().iter().zip(ctx.inputs[1].data()).map(|(g, x)| g * x).sum();
                    Tensor::scalar(d)
                });
                Ok(vec![ds, need(ctx, 1).then(|| ctx.grad.scale(sv))])
            }),
        ))
    }

    /// Element `i` of a flat tensor as a one-element tensor.
    pub fn select(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.value(x).len();
        if i >= n {
            return Err(Error::shape(format!("select index {i} out of range {n}")));
        }
        let v = Tensor::scalar(self.value(x).data()[i]);
        Ok(self.push(
            "select",
            v,
            &[x],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                g.data_mut()[i] = ctx.grad.data()[0];
                Ok(vec![Some(g)])
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(
            "sum",
            v,
            &[x],
            Box::new(|ctx| Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.data()[0]))])),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum_sq());
        self.push(
            "sum_sq",
            v,
            &[x],
            Box::new(|ctx| Ok(vec![Some(ctx.inputs[0].scale(2.0 * ctx.grad.data()[0]))])),
        )
    }

    /// Mean squared difference between `x` and `target`.
    pub fn mse(&mut self, x: Var, target: Var) -> Result<Var> {
        let d = self.sub(x, target)?;
        let s = self.sum_sq(d);
        let n = self.value(x).len() as f64;
        Ok(self.scale(s, 1.0 / n))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(
            "gelu",
            v,
            &[x],
            Box::new(|ctx| Ok(vec![Some(ctx.inputs[0].zip_map(ctx.grad, |x, g| g * gelu_grad(x))?)])),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(
            "sigmoid",
            v,
            &[x],
            Box::new(|ctx| Ok(vec![Some(ctx.output.zip_map(ctx.grad, |y, g| g * y * (1.0 - y))?)])),
        )
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let v = conv2d(self.value(x), self.value(kernel), self.value(bias))?;
        Ok(self.push(
            "conv2d",
            v,
            &[x, kernel, bias],
            Box::new(|ctx| {
                let (dx, dk, db) = conv2d_backward(ctx.inputs[0], ctx.inputs[1], ctx.inputs[2], ctx.grad)?;
                Ok(vec![Some(dx), Some(dk), Some(db)])
            }),
        ))
    }

    /// Per-pixel channel mixing `x · W` with `W` of shape `Cin × Cout`, no bias.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b, h, wd, cin) = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 || ws[0] != cin {
            return Err(Error::shape(format!(
                "linear weight {ws:?} incompatible with {cin} input channels"
            )));
        }
        let cout = ws[1];
        let out = matmul(self.value(x).data(), self.value(w).data(), b * h * wd, cin, cout);
        let v = Tensor::new(&[b, h, wd, cout], out)?;
        Ok(self.push(
            "linear",
            v,
            &[x, w],
            Box::new(move |ctx| {
                let rows = ctx.inputs[0].len() / cin;
                let dx = need(ctx, 0)
                    .then(|| {
                        let d = matmul_bt(ctx.grad.data(), ctx.inputs[1].data(), rows, cout, cin);
                        Tensor::new(ctx.inputs[0].shape(), d)
                    })
                    .transpose()?;
                let dw = need(ctx, 1)
                    .then(|| {
                        let d = matmul_at(ctx.inputs[0].data(), ctx.grad.data(), rows, cin, cout);
                        Tensor::new(ctx.inputs[1].shape(), d)
                    })
                    .transpose()?;
                Ok(vec![dx, dw])
            }),
        ))
    }

    /// `W x` for `W` of shape `m × n` and `x` of length `n`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let ws = self.value(w).shape().to_vec();
        let n = self.value(x).len();
        if ws.len() != 2 || ws[1] != n {
            return Err(Error::shape(format!("matvec {ws:?} × [{n}]")));
        }
        let m = ws[0];
        let out = matmul(self.value(w).data(), self.value(x).data(), m, n, 1);
        let v = Tensor::new(&[m], out)?;
        Ok(self.push(
            "matvec",
            v,
            &[w, x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let xv = ctx.inputs[1].data();
                let dw = need(ctx, 0)
                    .then(|| {
                        let d: Vec<f64> = (0..m * n).map(|k| g[k / n] * xv[k % n]).collect();
                        Tensor::new(&[m, n], d)
                    })
                    .transpose()?;
                let dx = need(ctx, 1)
                    .then(|| Tensor::new(&[n], matmul_at(ctx.inputs[0].data(), g, m, n, 1)))
                    .transpose()?;
                Ok(vec![dw, dx])
            }),
        ))
    }

    /// `xᵀ W + b` for a flat `x` of length `n`, `W` of shape `n × m`, `b` of length `m`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n = self.value(x).len();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 || ws[0] != n || self.value(b).len() != ws[1] {
            return Err(Error::shape(format!(
                "dense weight {ws:?} incompatible with input {n} / bias {}",
                self.value(b).len()
            )));
        }
        let m = ws[1];
        let mut out = matmul(self.value(x).data(), self.value(w).data(), 1, n, m);
        for (o, bb) in out.iter_mut().zip(self.value(b).data()) {
            *o += bb;
        }
        let v = Tensor::new(&[m], out)?;
        Ok(self.push(
            "dense",
            v,
            &[x, w, b],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let xv = ctx.inputs[0].data();
                let dx = need(ctx, 0)
                    .then(|| Tensor::new(ctx.inputs[0].shape(), matmul_bt(g, ctx.inputs[1].data(), 1, m, n)))
                    .transpose()?;
                let dw = need(ctx, 1)
                    .then(|| {
                        let d: Vec<f64> = (0..n * m).map(|k| xv[k / m] * g[k % m]).collect();
                        Tensor::new(&[n, m], d)
                    })
                    .transpose()?;
                Ok(vec![dx, dw, Some(ctx.grad.clone())])
            }),
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_channels(self.value(b))?;
        let c1 = self.value(a).dims4()?.3;
        Ok(self.push(
            "concat_channels",
            v,
            &[a, b],
            Box::new(move |ctx| {
                let (ga, gb) = ctx.grad.split_channels(c1)?;
                Ok(vec![Some(ga), Some(gb)])
            }),
        ))
    }

    /// Add a per-channel vector to every pixel of a `B×H×W×C` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).dims4()?.3;
        if self.value(bias).len() != c {
            return Err(Error::shape(format!(
                "channel bias of length {} for {c} channels",
                self.value(bias).len()
            )));
        }
        let bv = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for (k, val) in v.data_mut().iter_mut().enumerate() {
            *val += bv[k % c];
        }
        Ok(self.push(
            "add_channel_bias",
            v,
            &[x, bias],
            Box::new(move |ctx| {
                let db = need(ctx, 1).then(|| {
                    let mut d = vec![0.0; c];
                    for (k, g) in ctx.grad.data().iter().enumerate() {
                        d[k % c] += g;
                    }
                    Tensor::new(ctx.inputs[1].shape(), d)
                });
                Ok(vec![Some(ctx.grad.clone()), db.transpose()?])
            }),
        ))
    }

    /// Broadcast a per-channel vector over a `B×H×W` grid.
    pub fn broadcast_channels(&mut self, v: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let c = self.value(v).len();
        let vals = self.value(v).data().to_vec();
        let data: Vec<f64> = (0..b * h * w).flat_map(|_| vals.iter().copied()).collect();
        let out = Tensor::new(&[b, h, w, c], data)?;
        let shape = self.value(v).shape().to_vec();
        Ok(self.push(
            "broadcast_channels",
            out,
            &[v],
            Box::new(move |ctx| {
                let mut d = vec![0.0; c];
                for (k, g) in ctx.grad.data().iter().enumerate() {
                    d[k % c] += g;
                }
                Ok(vec![Some(Tensor::new(&shape, d)?)])
            }),
        ))
    }

    pub fn bicubic(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, h, w, _) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bicubic output extents must be >= 1"));
        }
        let plan = ResizePlan::new(h, w, out_h, out_w);
        let v = plan.forward(self.value(x))?;
        Ok(self.push(
            "bicubic",
            v,
            &[x],
            Box::new(move |ctx| Ok(vec![Some(plan.adjoint(ctx.grad)?)])),
        ))
    }

    /// `g ⊙ a + (1 − g) ⊙ b` with a single-channel gate broadcast over channels.
    pub fn gate_mix(&mut self, g: Var, a: Var, b: Var) -> Result<Var> {
        let (gb, gh, gw, gc) = self.value(g).dims4()?;
        let (ab, ah, aw, c) = self.value(a).dims4()?;
        self.value(a).expect_same_shape(self.value(b))?;
        if gc != 1 || (gb, gh, gw) != (ab, ah, aw) {
            return Err(Error::shape("gate must be B×H×W×1 matching the features"));
        }
        let gv = self.value(g).data();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<f64> = (0..av.len())
            .map(|k| {
                let gg = gv[k / c];
                gg * av[k] + (1.0 - gg) * bv[k]
            })
            .collect();
        let v = Tensor::new(self.value(a).shape(), out)?;
        Ok(self.push(
            "gate_mix",
            v,
            &[g, a, b],
            Box::new(move |ctx| {
                let (gv, av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
                let gr = ctx.grad.data();
                let mut dg = vec![0.0; gv.len()];
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; av.len()];
                for k in 0..av.len() {
                    let gg = gv[k / c];
                    dg[k / c] += gr[k] * (av[k] - bv[k]);
                    da[k] = gr[k] * gg;
                    db[k] = gr[k] * (1.0 - gg);
                }
                Ok(vec![
                    Some(Tensor::new(ctx.inputs[0].shape(), dg)?),
                    Some(Tensor::new(ctx.inputs[1].shape(), da)?),
                    Some(Tensor::new(ctx.inputs[2].shape(), db)?),
                ])
            }),
        ))
    }
}

/// `A (m×k) · B (k×n)`, row-major.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * brow[j];
            }
        }
    }
    out
}

/// `A (m×k) · Bᵀ` where `B` is stored `n×k`.
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `Aᵀ · B` where `A` is stored `m×k` and `B` is `m×n`; result `k×n`.
pub(crate) fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(20.0) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1., 2., 3., 4., 5., 6.]; // 2×3
        let b = [1., 0., -1., 2., 0.5, 1.]; // 3×2
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![0.5, 7.0, 2.0, 16.0]);
        let bt = [1., -1., 0.5, 0., 2., 1.]; // b transposed, 2×3
        assert_eq!(matmul_bt(&a, &bt, 2, 3, 2), vec![0.5, 7.0, 2.0, 16.0]);
        let at = [1., 4., 2., 5., 3., 6.]; // a transposed, 3×2
        assert_eq!(matmul_at(&at, &b, 3, 2, 2), vec![0.5, 7.0, 2.0, 16.0]);
    }
}
