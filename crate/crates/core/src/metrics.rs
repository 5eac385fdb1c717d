//! Reconstruction metrics, the bicubic baseline and the timing harness.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{bicubic_resize, Image};

/// PSNR values above this are printed as the cap.
pub const PSNR_TEXT_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels()) {
        return Err(Error::shape(format!(
            "metric inputs differ: {}×{}×{} vs {}×{}×{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(s / a.values().len() as f64)
}

/// `10 log10(1 / MSE)` over all channels; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// PSNR formatted for text output, capped at [`PSNR_TEXT_CAP`].
pub fn psnr_text(db: f64) -> String {
    format!("{:.2}", db.min(PSNR_TEXT_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged
/// over valid window positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, c) = (a.height(), a.width(), a.channels());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let px = |img: &Image, i: usize, j: usize| img.values()[(i * w + j) * c + ch];
        for i in 0..oh {
            for j in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (di, gi) in g.iter().enumerate() {
                    for (dj, gj) in g.iter().enumerate() {
                        let k = gi * gj;
                        let (x, y) = (px(a, i + di, j + dj), px(b, i + di, j + dj));
                        ma += k * x;
                        mb += k * y;
                        saa += k * x * x;
                        sbb += k * y * y;
                        sab += k * x * y;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (oh * ow * c) as f64)
}

/// Bicubic upsampling to `round(extent · scale)`, clamped to `[0, 1]`.
pub fn bicubic_baseline(lr: &Image, scale: f64) -> Result<Image> {
    if !(scale >= 1.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be >= 1, got {scale}")));
    }
    let oh = ((lr.height() as f64 * scale).round() as usize).max(1);
    let ow = ((lr.width() as f64 * scale).round() as usize).max(1);
    Image::from_tensor(&bicubic_resize(&lr.to_tensor(), oh, ow)?)
}

/// Optionally reduce both images to BT.601 luma before measuring.
fn prepare(a: &Image, b: &Image, y_channel: bool) -> (Image, Image) {
    if y_channel {
        (a.luma(), b.luma())
    } else {
        (a.clone(), b.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub wall_ms: f64,
    pub wall_ms_std: f64,
    pub runs: usize,
    pub nfe: Option<usize>,
}

/// PSNR and (when the images are large enough) SSIM of `out` against `reference`.
pub fn compare(out: &Image, reference: &Image, y_channel: bool) -> Result<MetricReport> {
    let (a, b) = prepare(out, reference, y_channel);
    let p = psnr(&a, &b)?;
    let s = if a.height() >= SSIM_WINDOW && a.width() >= SSIM_WINDOW {
        Some(ssim(&a, &b)?)
    } else {
        None
    };
    Ok(MetricReport {
        psnr: p,
        ssim: s,
        wall_ms: 0.0,
        wall_ms_std: 0.0,
        runs: 1,
        nfe: None,
    })
}

/// Timing summary of repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub runs: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub nfe: usize,
}

/// Time `f` over `runs` calls after one untimed warm-up call. `f` returns
/// the number of drift evaluations it performed.
pub fn bench<F>(runs: usize, mut f: F) -> Result<Timing>
where
    F: FnMut() -> Result<usize>,
{
    if runs == 0 {
        return Err(Error::invalid("bench needs at least one run"));
    }
    f()?;
    let mut times = Vec::with_capacity(runs);
    let mut nfe = 0;
    for _ in 0..runs {
        let clock = Instant::now();
        nfe = f()?;
        times.push(clock.elapsed().as_secs_f64() * 1e3);
    }
    let n = runs as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    Ok(Timing {
        runs,
        mean_ms: mean,
        std_ms: var.sqrt(),
        min_ms: times.iter().cloned().fold(f64::INFINITY, f64::min),
        max_ms: times.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        nfe,
    })
}
