//! Two-dimensional discrete Fourier transforms over the spatial axes.
//!
//! Forward transforms are unnormalized; inverse transforms carry the
//! `1/(H·W)` factor so that `ifft2(fft2(x)) == x`. Arbitrary (non power of
//! two) sizes are handled by rustfft's mixed-radix and Bluestein plans.

use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use super::{ComplexTensor, Tensor};
use crate::error::{Error, Result};
use crate::par;

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    let planner = PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()));
    let mut guard = planner.lock().unwrap_or_else(|e| e.into_inner());
    guard.plan_fft(len, direction)
}

/// In-place 2-D transform of one contiguous `h × w` slab (no normalization).
fn fft2_contiguous(buf: &mut [Complex64], h: usize, w: usize, direction: FftDirection) {
    if w > 1 {
        plan(w, direction).process(buf);
    }
    if h > 1 {
        let mut col = vec![Complex64::new(0.0, 0.0); h * w];
        for r in 0..h {
            for c in 0..w {
                col[c * h + r] = buf[r * w + c];
            }
        }
        plan(h, direction).process(&mut col);
        for r in 0..h {
            for c in 0..w {
                buf[r * w + c] = col[c * h + r];
            }
        }
    }
}

/// Transform every `(batch, channel)` slab of a `B × H × W × C` complex
/// buffer in place. The inverse direction applies the `1/(H·W)` factor.
pub(crate) fn fft2_bhwc(
    data: &mut [Complex64],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    inverse: bool,
) {
    let direction = if inverse {
        FftDirection::Inverse
    } else {
        FftDirection::Forward
    };
    let norm = if inverse { 1.0 / (h * w) as f64 } else { 1.0 };
    let slab = h * w * c;
    par::for_each_chunk_mut(data, slab, |_, item| {
        let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
        for ch in 0..c {
            for p in 0..h * w {
                buf[p] = item[p * c + ch];
            }
            fft2_contiguous(&mut buf, h, w, direction);
            for p in 0..h * w {
                item[p * c + ch] = buf[p] * norm;
            }
        }
    });
    let _ = b;
}

/// Forward transform of a real `B × H × W × C` tensor.
pub(crate) fn rfft2_bhwc(x: &Tensor) -> Result<Vec<Complex64>> {
    let (b, h, w, c) = x.dims4()?;
    let mut data: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_bhwc(&mut data, b, h, w, c, false);
    Ok(data)
}

/// Inverse transform returning the real part of the result.
pub(crate) fn irfft2_bhwc(
    mut spec: Vec<Complex64>,
    b: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Result<Tensor> {
    fft2_bhwc(&mut spec, b, h, w, c, true);
    Tensor::new(&[b, h, w, c], spec.into_iter().map(|z| z.re).collect())
}

/// Spatial layout of a complex tensor: `[H, W]` for rank 2, otherwise
/// `[..., H, W, C]` with all leading axes folded into the batch.
fn spatial_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape.len() {
        0 | 1 => Err(Error::shape(format!(
            "fft2 needs at least 2 axes, got {shape:?}"
        ))),
        2 => Ok((1, shape[0], shape[1], 1)),
        n => {
            let b = shape[..n - 3].iter().product();
            Ok((b, shape[n - 3], shape[n - 2], shape[n - 1]))
        }
    }
}

fn transform(x: &ComplexTensor, inverse: bool) -> Result<ComplexTensor> {
    let (b, h, w, c) = spatial_dims(x.shape())?;
    let mut data: Vec<Complex64> = x
        .re()
        .iter()
        .zip(x.im())
        .map(|(&r, &i)| Complex64::new(r, i))
        .collect();
    fft2_bhwc(&mut data, b, h, w, c, inverse);
    let (re, im) = data.into_iter().map(|z| (z.re, z.im)).unzip();
    ComplexTensor::new(x.shape(), re, im)
}

/// Unnormalized forward DFT over the spatial axes.
pub fn fft2(x: &ComplexTensor) -> Result<ComplexTensor> {
    transform(x, false)
}

/// Inverse DFT with `1/(H·W)` normalization.
pub fn ifft2(x: &ComplexTensor) -> Result<ComplexTensor> {
    transform(x, true)
}

/// Signed frequency of DFT index `u` on an axis of length `n`
/// (`u > n/2` wraps to `u - n`).
pub fn signed_freq(u: usize, n: usize) -> i64 {
    if u > n / 2 {
        u as i64 - n as i64
    } else {
        u as i64
    }
}

/// Index of the mode `-u` on an axis of length `n`.
pub(crate) fn neg_index(u: usize, n: usize) -> usize {
    (n - u) % n
}
