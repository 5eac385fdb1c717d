//! Separable Catmull-Rom bicubic resampling.
//!
//! Pixel centers follow the align-corners-false convention and out-of-range
//! taps clamp to the edge. The resize is linear, so the same tap tables
//! drive both the forward pass and its adjoint.

use super::Tensor;
use crate::error::{Error, Result};

const A: f64 = -0.5;

/// Catmull-Rom cubic convolution kernel.
pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four (source index, weight) taps for every output position on one axis.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    taps: Vec<[(usize, f64); 4]>,
}

impl AxisTaps {
    pub(crate) fn new(n_in: usize, n_out: usize) -> Self {
        let ratio = n_in as f64 / n_out as f64;
        let taps = (0..n_out)
            .map(|j| {
                let src = (j as f64 + 0.5) * ratio - 0.5;
                let base = src.floor();
                let frac = src - base;
                let mut row = [(0usize, 0.0f64); 4];
                for (k, slot) in row.iter_mut().enumerate() {
                    let offset = k as f64 - 1.0;
                    let idx = (base + offset).clamp(0.0, (n_in - 1) as f64) as usize;
                    *slot = (idx, cubic_kernel(offset - frac));
                }
                row
            })
            .collect();
        AxisTaps { taps }
    }

    fn len(&self) -> usize {
        self.taps.len()
    }
}

/// Precomputed bicubic resize between two spatial grids.
#[derive(Clone, Debug)]
pub(crate) struct ResizePlan {
    in_h: usize,
    in_w: usize,
    rows: AxisTaps,
    cols: AxisTaps,
}

impl ResizePlan {
    pub(crate) fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        ResizePlan {
            in_h,
            in_w,
            rows: AxisTaps::new(in_h, out_h),
            cols: AxisTaps::new(in_w, out_w),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if (h, w) != (self.in_h, self.in_w) {
            return Err(Error::shape("resize plan built for a different grid"));
        }
        let (oh, ow) = (self.rows.len(), self.cols.len());
        let src = x.data();
        // columns first: B × H × OW × C
        let mut tmp = vec![0.0; b * h * ow * c];
        for bi in 0..b {
            for r in 0..h {
                let in_row = &src[((bi * h + r) * w) * c..((bi * h + r + 1) * w) * c];
                let out_row = &mut tmp[((bi * h + r) * ow) * c..((bi * h + r + 1) * ow) * c];
                for (j, taps) in self.cols.taps.iter().enumerate() {
                    let dst = &mut out_row[j * c..(j + 1) * c];
                    for &(idx, wt) in taps {
                        let s = &in_row[idx * c..(idx + 1) * c];
                        for ch in 0..c {
                            dst[ch] += wt * s[ch];
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; b * oh * ow * c];
        let row_len = ow * c;
        for bi in 0..b {
            for (i, taps) in self.rows.taps.iter().enumerate() {
                let dst_off = (bi * oh + i) * row_len;
                for &(idx, wt) in taps {
                    let src_off = (bi * h + idx) * row_len;
                    for k in 0..row_len {
                        out[dst_off + k] += wt * tmp[src_off + k];
                    }
                }
            }
        }
        Tensor::new(&[b, oh, ow, c], out)
    }

    /// Adjoint of [`ResizePlan::forward`] (maps output-grid gradients back).
    pub(crate) fn adjoint(&self, g: &Tensor) -> Result<Tensor> {
        let (b, oh, ow, c) = g.dims4()?;
        if (oh, ow) != (self.rows.len(), self.cols.len()) {
            return Err(Error::shape("resize adjoint got a gradient of the wrong size"));
        }
        let (h, w) = (self.in_h, self.in_w);
        let row_len = ow * c;
        let gd = g.data();
        let mut tmp = vec![0.0; b * h * row_len];
        for bi in 0..b {
            for (i, taps) in self.rows.taps.iter().enumerate() {
                let g_off = (bi * oh + i) * row_len;
                for &(idx, wt) in taps {
                    let t_off = (bi * h + idx) * row_len;
                    for k in 0..row_len {
                        tmp[t_off + k] += wt * gd[g_off + k];
                    }
                }
            }
        }
        let mut out = vec![0.0; b * h * w * c];
        for bi in 0..b {
            for r in 0..h {
                let t_row = &tmp[((bi * h + r) * ow) * c..((bi * h + r + 1) * ow) * c];
                let o_row = &mut out[((bi * h + r) * w) * c..((bi * h + r + 1) * w) * c];
                for (j, taps) in self.cols.taps.iter().enumerate() {
                    let s = &t_row[j * c..(j + 1) * c];
                    for &(idx, wt) in taps {
                        let d = &mut o_row[idx * c..(idx + 1) * c];
                        for ch in 0..c {
                            d[ch] += wt * s[ch];
                        }
                    }
                }
            }
        }
        Tensor::new(&[b, h, w, c], out)
    }
}

/// Bicubic resize of a `B × H × W × C` tensor to `out_h × out_w`.
pub fn bicubic_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w, _) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bicubic_resize output extents must be >= 1"));
    }
    ResizePlan::new(h, w, out_h, out_w).forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_is_partition_of_unity() {
        for k in 0..20 {
            let f = k as f64 / 20.0;
            let s: f64 = (-1..=2).map(|o| cubic_kernel(o as f64 - f)).sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::full(&[1, 5, 7, 2], 0.42);
        for (oh, ow) in [(3, 4), (11, 9), (5, 7), (1, 1)] {
            let y = bicubic_resize(&x, oh, ow).unwrap();
            assert!(y.data().iter().all(|v| (v - 0.42).abs() < 1e-12));
        }
    }

    #[test]
    fn identity_scale_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 6, 5, 3], 1.0, &mut rng);
        let y = bicubic_resize(&x, 6, 5).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() < 1e-12);
    }

    #[test]
    fn ramp_downsample_matches_analytic_ramp() {
        // ramp v_i = i/15 over 16 px; output j samples source (2j + 0.5)
        let x = Tensor::new(&[1, 1, 16, 1], (0..16).map(|i| i as f64 / 15.0).collect()).unwrap();
        let y = bicubic_resize(&x, 1, 8).unwrap();
        for j in 1..7 {
            let expected = (2.0 * j as f64 + 0.5) / 15.0;
            assert!((y.data()[j] - expected).abs() < 1e-3);
        }
    }

    #[test]
    fn adjoint_matches_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plan = ResizePlan::new(5, 6, 8, 3);
        let x = Tensor::randn(&[2, 5, 6, 2], 1.0, &mut rng);
        let g = Tensor::randn(&[2, 8, 3, 2], 1.0, &mut rng);
        let lhs: f64 = plan.forward(&x).unwrap().mul(&g).unwrap().sum();
        let rhs: f64 = x.mul(&plan.adjoint(&g).unwrap()).unwrap().sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn commutes_with_offset_and_channel_swap(seed in 0u64..1000, oh in 1usize..9, ow in 1usize..9, off in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[1, 4, 5, 2], 1.0, &mut rng);
            let y = bicubic_resize(&x, oh, ow).unwrap();
            let shifted = bicubic_resize(&x.map(|v| v + off), oh, ow).unwrap();
            prop_assert!(shifted.max_abs_diff(&y.map(|v| v + off)).unwrap() < 1e-12);
            let (a, b) = x.split_channels(1).unwrap();
            let swapped = bicubic_resize(&b.concat_channels(&a).unwrap(), oh, ow).unwrap();
            let (ya, yb) = y.split_channels(1).unwrap();
            prop_assert_eq!(swapped, yb.concat_channels(&ya).unwrap());
        }
    }
}
