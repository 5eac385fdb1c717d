//! Softmax-free Galerkin attention over spatial tokens.
//!
//! Each batch item's `H·W` pixels are tokens. Keys and values are
//! normalized per channel across tokens, so the `C × C` product `K̃ᵀṼ` is
//! formed once per item and the cost is linear in the token count.

use crate::autodiff::ops::{matmul, matmul_at, matmul_bt};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// `(x − μ) / √(σ² + ε) · scale + shift` with per-channel statistics over tokens.
pub fn token_norm(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let (x, s, b) = (tape.constant(x.clone()), tape.constant(scale.clone()), tape.constant(shift.clone()));
    let y = tape.token_norm(x, s, b)?;
    Ok(tape.value(y).clone())
}

/// `Q (K̃ᵀ Ṽ) / n` per batch item.
pub fn attention_core(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let y = tape.attention_core(q, k, v)?;
    Ok(tape.value(y).clone())
}

struct TokenStats {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn token_stats(x: &Tensor) -> Result<TokenStats> {
    let (b, h, w, c) = x.dims4()?;
    let n = h * w;
    let d = x.data();
    let mut xhat = vec![0.0; d.len()];
    let mut inv_std = vec![0.0; b * c];
    for bi in 0..b {
        let item = &d[bi * n * c..(bi + 1) * n * c];
        for ch in 0..c {
            let mean = (0..n).map(|t| item[t * c + ch]).sum::<f64>() / n as f64;
            let var = (0..n).map(|t| (item[t * c + ch] - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[bi * c + ch] = is;
            for t in 0..n {
                xhat[(bi * n + t) * c + ch] = (item[t * c + ch] - mean) * is;
            }
        }
    }
    Ok(TokenStats { xhat, inv_std })
}

impl Tape {
    pub fn token_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (b, h, w, c) = self.value(x).dims4()?;
        if self.value(scale).len() != c || self.value(shift).len() != c {
            return Err(Error::shape(format!("token norm parameters must have {c} entries")));
        }
        let n = h * w;
        let stats = token_stats(self.value(x))?;
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let out: Vec<f64> = stats
            .xhat
            .iter()
            .enumerate()
            .map(|(k, &v)| v * sc[k % c] + sh[k % c])
            .collect();
        let value = Tensor::new(&[b, h, w, c], out)?;
        Ok(self.push(
            "token_norm",
            value,
            &[x, scale, shift],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let sc = ctx.inputs[1].data();
                let mut dscale = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                for (k, &gk) in g.iter().enumerate() {
                    dscale[k % c] += gk * stats.xhat[k];
                    dshift[k % c] += gk;
                }
                let mut dx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let idx = |t: usize| (bi * n + t) * c + ch;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for t in 0..n {
                            let dxh = g[idx(t)] * sc[ch];
                            m1 += dxh;
                            m2 += dxh * stats.xhat[idx(t)];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        let is = stats.inv_std[bi * c + ch];
                        for t in 0..n {
                            let dxh = g[idx(t)] * sc[ch];
                            dx[idx(t)] = is * (dxh - m1 - stats.xhat[idx(t)] * m2);
                        }
                    }
                }
                Ok(vec![
                    Some(Tensor::new(ctx.inputs[0].shape(), dx)?),
                    Some(Tensor::new(ctx.inputs[1].shape(), dscale)?),
                    Some(Tensor::new(ctx.inputs[2].shape(), dshift)?),
                ])
            }),
        ))
    }

    pub fn attention_core(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (b, h, w, c) = self.value(q).dims4()?;
        self.value(q).expect_same_shape(self.value(k))?;
        self.value(q).expect_same_shape(self.value(v))?;
        let n = h * w;
        let inv_n = 1.0 / n as f64;
        let slab = n * c;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = Vec::with_capacity(b * slab);
        let mut mats = Vec::with_capacity(b);
        for bi in 0..b {
            let r = bi * slab..(bi + 1) * slab;
            let m: Vec<f64> = matmul_at(&kd[r.clone()], &vd[r.clone()], n, c, c)
                .into_iter()
                .map(|x| x * inv_n)
                .collect();
            out.extend(matmul(&qd[r], &m, n, c, c));
            mats.push(m);
        }
        let value = Tensor::new(&[b, h, w, c], out)?;
        Ok(self.push(
            "attention_core",
            value,
            &[q, k, v],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let (qd, kd, vd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
                let mut dq = Vec::with_capacity(g.len());
                let mut dk = Vec::with_capacity(g.len());
                let mut dv = Vec::with_capacity(g.len());
                for bi in 0..b {
                    let r = bi * slab..(bi + 1) * slab;
                    dq.extend(matmul_bt(&g[r.clone()], &mats[bi], n, c, c));
                    // M̄ = Qᵀ G / n
                    let mbar: Vec<f64> = matmul_at(&qd[r.clone()], &g[r.clone()], n, c, c)
                        .into_iter()
                        .map(|x| x * inv_n)
                        .collect();
                    dk.extend(matmul_bt(&vd[r.clone()], &mbar, n, c, c));
                    dv.extend(matmul(&kd[r], &mbar, n, c, c));
                }
                let shape = ctx.inputs[0].shape();
                Ok(vec![
                    Some(Tensor::new(shape, dq)?),
                    Some(Tensor::new(shape, dk)?),
                    Some(Tensor::new(shape, dv)?),
                ])
            }),
        ))
    }
}
