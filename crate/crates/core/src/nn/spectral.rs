//! Weighted spectral convolution and Fourier zero-pad upsampling.
//!
//! The filter `P` is stored on a fixed `H_max × W_max` mode grid as a
//! `C_in × C_out` complex matrix per mode. On an operating grid of any size
//! every mode is used: signed frequencies inside the stored range index `P`
//! directly and frequencies beyond it reuse the outermost stored ring.

use rustfft::num_complex::Complex64;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::fft::{fft2_bhwc, neg_index, rfft2_bhwc, signed_freq};
use crate::tensor::{ComplexTensor, Tensor};

/// `w(ξ) = 1 + γ‖ξ‖^α` over an `H × W` grid of signed frequencies.
pub fn mode_weight(height: usize, width: usize, gamma: f64, alpha: f64) -> Tensor {
    let norms = ModeGeometry::norms(height, width);
    let data = norms.iter().map(|&n| 1.0 + gamma * pow_norm(n, alpha)).collect();
    Tensor::new(&[height, width], data).expect("grid extents are valid")
}

fn pow_norm(n: f64, alpha: f64) -> f64 {
    if n == 0.0 {
        0.0
    } else {
        n.powf(alpha)
    }
}

/// A spectral filter as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFilter {
    /// Real and imaginary parts of `P`, each `H_max × W_max × C × C`.
    pub p_re: Tensor,
    pub p_im: Tensor,
    pub gamma: f64,
    pub alpha: f64,
}

impl SpectralFilter {
    /// `P(ξ) = I` at every stored mode.
    pub fn identity(modes_h: usize, modes_w: usize, channels: usize, gamma: f64, alpha: f64) -> Self {
        let mut p_re = Tensor::zeros(&[modes_h, modes_w, channels, channels]);
        for m in 0..modes_h * modes_w {
            for i in 0..channels {
                p_re.data_mut()[(m * channels + i) * channels + i] = 1.0;
            }
        }
        SpectralFilter {
            p_im: Tensor::zeros(p_re.shape()),
            p_re,
            gamma,
            alpha,
        }
    }

    pub fn zero(modes_h: usize, modes_w: usize, channels: usize) -> Self {
        let shape = [modes_h, modes_w, channels, channels];
        SpectralFilter {
            p_re: Tensor::zeros(&shape),
            p_im: Tensor::zeros(&shape),
            gamma: 0.0,
            alpha: 0.7,
        }
    }
}

/// Mode bookkeeping for one operating grid against one stored grid.
struct ModeGeometry {
    h: usize,
    w: usize,
    /// Stored mode index used by each operating mode.
    stored: Vec<usize>,
    norm: Vec<f64>,
}

impl ModeGeometry {
    fn norms(h: usize, w: usize) -> Vec<f64> {
        (0..h * w)
            .map(|p| {
                let fu = signed_freq(p / w, h) as f64;
                let fv = signed_freq(p % w, w) as f64;
                fu.hypot(fv)
            })
            .collect()
    }

    fn new(h: usize, w: usize, mh: usize, mw: usize) -> Self {
        let clamp = |f: i64, m: usize| -> usize {
            let lo = -(((m - 1) / 2) as i64);
            let hi = (m / 2) as i64;
            let f = f.clamp(lo, hi);
            if f >= 0 {
                f as usize
            } else {
                (m as i64 + f) as usize
            }
        };
        let stored = (0..h * w)
            .map(|p| {
                let su = clamp(signed_freq(p / w, h), mh);
                let sv = clamp(signed_freq(p % w, w), mw);
                su * mw + sv
            })
            .collect();
        ModeGeometry {
            h,
            w,
            stored,
            norm: Self::norms(h, w),
        }
    }

    fn weights(&self, gamma: f64, alpha: f64) -> Vec<f64> {
        self.norm.iter().map(|&n| 1.0 + gamma * pow_norm(n, alpha)).collect()
    }
}

fn filter_dims(p_re: &Tensor, p_im: &Tensor, c: usize) -> Result<(usize, usize)> {
    p_re.expect_same_shape(p_im)?;
    let s = p_re.shape();
    if s.len() != 4 || s[2] != c || s[3] != c {
        return Err(Error::shape(format!(
            "spectral filter {s:?} does not act on {c} channels"
        )));
    }
    Ok((s[0], s[1]))
}

/// `ifft2` of the Hermitian-symmetrized product `w ⊙ P · fft2(v)`, before the
/// imaginary part is discarded.
pub fn spectral_conv_complex(v: &Tensor, f: &SpectralFilter) -> Result<ComplexTensor> {
    let (b, h, w, c) = v.dims4()?;
    let (mh, mw) = filter_dims(&f.p_re, &f.p_im, c)?;
    let geo = ModeGeometry::new(h, w, mh, mw);
    let wt = geo.weights(f.gamma, f.alpha);
    let vhat = rfft2_bhwc(v)?;
    let z = mix_modes(&vhat, f.p_re.data(), f.p_im.data(), &geo, &wt, b, c);
    let mut sym = symmetrize(&z, b, h, w, c);
    fft2_bhwc(&mut sym, b, h, w, c, true);
    let (re, im) = sym.into_iter().map(|z| (z.re, z.im)).unzip();
    ComplexTensor::new(v.shape(), re, im)
}

/// Weighted spectral convolution with a real output.
pub fn spectral_conv(v: &Tensor, f: &SpectralFilter) -> Result<Tensor> {
    Ok(spectral_conv_complex(v, f)?.real_part())
}

/// `Z_o(ξ) = w(ξ) Σ_i P_io(ξ) V_i(ξ)` for every batch item.
fn mix_modes(
    vhat: &[Complex64],
    p_re: &[f64],
    p_im: &[f64],
    geo: &ModeGeometry,
    wt: &[f64],
    b: usize,
    c: usize,
) -> Vec<Complex64> {
    let hw = geo.h * geo.w;
    let mut z = vec![Complex64::new(0.0, 0.0); b * hw * c];
    for bi in 0..b {
        for p in 0..hw {
            let base = (bi * hw + p) * c;
            let pbase = geo.stored[p] * c * c;
            for i in 0..c {
                let vi = vhat[base + i];
                if vi.re == 0.0 && vi.im == 0.0 {
                    continue;
                }
                for o in 0..c {
                    let k = pbase + i * c + o;
                    z[base + o] += Complex64::new(p_re[k], p_im[k]) * vi;
                }
            }
            for o in 0..c {
                z[base + o] *= wt[p];
            }
        }
    }
    z
}

/// `½ (Z(ξ) + conj Z(−ξ))` per batch item and channel.
fn symmetrize(z: &[Complex64], b: usize, h: usize, w: usize, c: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); z.len()];
    for bi in 0..b {
        for u in 0..h {
            for v in 0..w {
                let p = (bi * h + u) * w + v;
                let q = (bi * h + neg_index(u, h)) * w + neg_index(v, w);
                for ch in 0..c {
                    out[p * c + ch] = 0.5 * (z[p * c + ch] + z[q * c + ch].conj());
                }
            }
        }
    }
    out
}

impl Tape {
    /// Differentiable spectral convolution. `gamma` and `alpha` are
    /// one-element tensors.
    pub fn spectral_conv(
        &mut self,
        v: Var,
        p_re: Var,
        p_im: Var,
        gamma: Var,
        alpha: Var,
    ) -> Result<Var> {
        let (b, h, w, c) = self.value(v).dims4()?;
        let (mh, mw) = filter_dims(self.value(p_re), self.value(p_im), c)?;
        if self.value(gamma).len() != 1 || self.value(alpha).len() != 1 {
            return Err(Error::shape("gamma and alpha must be one-element tensors"));
        }
        let g = self.value(gamma).data()[0];
        let a = self.value(alpha).data()[0];
        let geo = ModeGeometry::new(h, w, mh, mw);
        let wt = geo.weights(g, a);
        let vhat = rfft2_bhwc(self.value(v))?;
        let mut z = mix_modes(&vhat, self.value(p_re).data(), self.value(p_im).data(), &geo, &wt, b, c);
        fft2_bhwc(&mut z, b, h, w, c, true);
        let out = Tensor::new(&[b, h, w, c], z.into_iter().map(|z| z.re).collect())?;
        let keep = self.any_requires_grad(&[v, p_re, p_im, gamma, alpha]);
        let vhat = if keep { vhat } else { Vec::new() };
        Ok(self.push(
            "spectral_conv",
            out,
            &[v, p_re, p_im, gamma, alpha],
            Box::new(move |ctx| spectral_conv_backward(ctx.grad, ctx, &vhat, &geo, &wt, g, a, (b, c, mh, mw))),
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn spectral_conv_backward(
    grad: &Tensor,
    ctx: &crate::autodiff::BackCtx<'_>,
    vhat: &[Complex64],
    geo: &ModeGeometry,
    wt: &[f64],
    gamma: f64,
    alpha: f64,
    (b, c, mh, mw): (usize, usize, usize, usize),
) -> Result<Vec<Option<Tensor>>> {
    let (h, w) = (geo.h, geo.w);
    let hw = h * w;
    let p_re = ctx.inputs[1].data();
    let p_im = ctx.inputs[2].data();
    // adjoint of Re ∘ ifft2: Z̄ = fft2(G) / (HW)
    let mut zbar = rfft2_bhwc(grad)?;
    let inv = 1.0 / hw as f64;
    for z in zbar.iter_mut() {
        *z *= inv;
    }
    let mut dp_re = vec![0.0; mh * mw * c * c];
    let mut dp_im = vec![0.0; mh * mw * c * c];
    let mut dw = vec![0.0; hw];
    let mut vbar = vec![Complex64::new(0.0, 0.0); b * hw * c];
    for bi in 0..b {
        for p in 0..hw {
            let base = (bi * hw + p) * c;
            let pbase = geo.stored[p] * c * c;
            let mut wacc = 0.0;
            for i in 0..c {
                let vi = vhat[base + i];
                let mut acc = Complex64::new(0.0, 0.0);
                for o in 0..c {
                    let k = pbase + i * c + o;
                    let pio = Complex64::new(p_re[k], p_im[k]);
                    let zo = zbar[base + o];
                    // P̄ = w Z̄ conj(V)
                    let gp = zo * vi.conj() * wt[p];
                    dp_re[k] += gp.re;
                    dp_im[k] += gp.im;
                    acc += pio.conj() * zo;
                    // w̄ = Re(conj(Z̄) P V)
                    wacc += (zo.conj() * pio * vi).re;
                }
                vbar[base + i] = acc * wt[p];
            }
            dw[p] += wacc;
        }
    }
    let dv = ctx.needs[0]
        .then(|| {
            // adjoint of fft2 on a real input: Re(HW · ifft2(V̄))
            fft2_bhwc(&mut vbar, b, h, w, c, true);
            let hwf = hw as f64;
            Tensor::new(ctx.inputs[0].shape(), vbar.iter().map(|z| z.re * hwf).collect())
        })
        .transpose()?;
    let dgamma: f64 = dw.iter().zip(&geo.norm).map(|(d, &n)| d * pow_norm(n, alpha)).sum();
    let dalpha: f64 = dw
        .iter()
        .zip(&geo.norm)
        .map(|(d, &n)| if n == 0.0 { 0.0 } else { d * gamma * n.powf(alpha) * n.ln() })
        .sum();
    Ok(vec![
        dv,
        Some(Tensor::new(ctx.inputs[1].shape(), dp_re)?),
        Some(Tensor::new(ctx.inputs[2].shape(), dp_im)?),
        Some(Tensor::new(ctx.inputs[3].shape(), vec![dgamma])?),
        Some(Tensor::new(ctx.inputs[4].shape(), vec![dalpha])?),
    ])
}

/// Map an `h × w` spectrum onto an `H × W` grid by signed frequency.
fn embed_index(h: usize, w: usize, big_h: usize, big_w: usize) -> Vec<usize> {
    (0..h * w)
        .map(|p| {
            let fu = signed_freq(p / w, h);
            let fv = signed_freq(p % w, w);
            let u = if fu >= 0 { fu as usize } else { (big_h as i64 + fu) as usize };
            let v = if fv >= 0 { fv as usize } else { (big_w as i64 + fv) as usize };
            u * big_w + v
        })
        .collect()
}

/// Fourier zero-pad interpolation from `h × w` to `H × W` (`H ≥ h`, `W ≥ w`),
/// rescaled by `HW/(hw)` so spatial magnitudes are preserved.
pub fn spectral_upsample(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let v = tape.constant(x.clone());
    let y = tape.spectral_upsample(v, out_h, out_w)?;
    Ok(tape.value(y).clone())
}

impl Tape {
    pub fn spectral_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, h, w, c) = self.value(x).dims4()?;
        if out_h < h || out_w < w {
            return Err(Error::shape(format!(
                "spectral upsampling cannot shrink {h}×{w} to {out_h}×{out_w}"
            )));
        }
        let idx = embed_index(h, w, out_h, out_w);
        let scale = (out_h * out_w) as f64 / (h * w) as f64;
        let xhat = rfft2_bhwc(self.value(x))?;
        let (hw, big) = (h * w, out_h * out_w);
        let mut z = vec![Complex64::new(0.0, 0.0); b * big * c];
        for bi in 0..b {
            for (p, &q) in idx.iter().enumerate() {
                for ch in 0..c {
                    z[(bi * big + q) * c + ch] = xhat[(bi * hw + p) * c + ch] * scale;
                }
            }
        }
        fft2_bhwc(&mut z, b, out_h, out_w, c, true);
        let out = Tensor::new(&[b, out_h, out_w, c], z.into_iter().map(|z| z.re).collect())?;
        Ok(self.push(
            "spectral_upsample",
            out,
            &[x],
            Box::new(move |ctx| {
                let g = rfft2_bhwc(ctx.grad)?;
                let mut small = vec![Complex64::new(0.0, 0.0); b * hw * c];
                for bi in 0..b {
                    for (p, &q) in idx.iter().enumerate() {
                        for ch in 0..c {
                            small[(bi * hw + p) * c + ch] = g[(bi * big + q) * c + ch];
                        }
                    }
                }
                fft2_bhwc(&mut small, b, h, w, c, true);
                Ok(vec![Some(Tensor::new(
                    &[b, h, w, c],
                    small.into_iter().map(|z| z.re).collect(),
                )?)])
            }),
        ))
    }
}
