//! Same-padded 2-D cross-correlation on `B × H × W × C` tensors.

use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

struct Geometry {
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

fn geometry(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Geometry> {
    let (b, h, w, cin) = x.dims4()?;
    let (kh, kw, kcin, cout) = kernel
        .dims4()
        .map_err(|_| Error::shape(format!("conv kernel must be kH×kW×Cin×Cout, got {:?}", kernel.shape())))?;
    if kcin != cin {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {cin}, kernel expects {kcin}"
        )));
    }
    if bias.len() != cout {
        return Err(Error::shape(format!(
            "conv2d bias has {} entries, kernel produces {cout}",
            bias.len()
        )));
    }
    Ok(Geometry {
        b,
        h,
        w,
        cin,
        cout,
        kh,
        kw,
    })
}

/// Iterate the valid (input pixel, kernel tap) pairs feeding output `(y, x)`.
#[inline]
fn for_taps(g: &Geometry, y: usize, x: usize, mut f: impl FnMut(usize, usize)) {
    let (py, px) = ((g.kh - 1) / 2, (g.kw - 1) / 2);
    for ky in 0..g.kh {
        let iy = y as isize + ky as isize - py as isize;
        if iy < 0 || iy >= g.h as isize {
            continue;
        }
        for kx in 0..g.kw {
            let ix = x as isize + kx as isize - px as isize;
            if ix < 0 || ix >= g.w as isize {
                continue;
            }
            f(iy as usize * g.w + ix as usize, ky * g.kw + kx);
        }
    }
}

/// Cross-correlate `x` with `kernel` (zero same-padding) and add `bias`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = geometry(x, kernel, bias)?;
    let (cin, cout) = (g.cin, g.cout);
    let k = kernel.data();
    let mut out = vec![0.0; g.b * g.h * g.w * cout];
    let plane_in = g.h * g.w * cin;
    par::for_each_chunk_mut(&mut out, g.h * g.w * cout, |bi, chunk| {
        let xin = &x.data()[bi * plane_in..(bi + 1) * plane_in];
        for y in 0..g.h {
            for xx in 0..g.w {
                let o = &mut chunk[(y * g.w + xx) * cout..(y * g.w + xx + 1) * cout];
                o.copy_from_slice(bias.data());
                for_taps(&g, y, xx, |p, tap| {
                    let xi = &xin[p * cin..(p + 1) * cin];
                    let kt = &k[tap * cin * cout..(tap + 1) * cin * cout];
                    for (ci, &v) in xi.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &kt[ci * cout..(ci + 1) * cout];
                        for co in 0..cout {
                            o[co] += v * row[co];
                        }
                    }
                });
            }
        }
    });
    Tensor::new(&[g.b, g.h, g.w, cout], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = geometry(x, kernel, bias)?;
    let (cin, cout) = (g.cin, g.cout);
    if grad_out.shape() != [g.b, g.h, g.w, cout] {
        return Err(Error::shape("conv2d_backward: gradient shape mismatch"));
    }
    let k = kernel.data();
    let plane_in = g.h * g.w * cin;
    let plane_out = g.h * g.w * cout;
    let ksize = kernel.len();
    // per-item partials, summed afterwards in batch order
    let parts = par::map_range(g.b, |bi| {
        let xin = &x.data()[bi * plane_in..(bi + 1) * plane_in];
        let gout = &grad_out.data()[bi * plane_out..(bi + 1) * plane_out];
        let mut dx = vec![0.0; plane_in];
        let mut dk = vec![0.0; ksize];
        let mut db = vec![0.0; cout];
        for y in 0..g.h {
            for xx in 0..g.w {
                let go = &gout[(y * g.w + xx) * cout..(y * g.w + xx + 1) * cout];
                for co in 0..cout {
                    db[co] += go[co];
                }
                for_taps(&g, y, xx, |p, tap| {
                    let base = tap * cin * cout;
                    for ci in 0..cin {
                        let row = &k[base + ci * cout..base + (ci + 1) * cout];
                        let mut acc = 0.0;
                        for co in 0..cout {
                            acc += row[co] * go[co];
                        }
                        dx[p * cin + ci] += acc;
                        let v = xin[p * cin + ci];
                        if v != 0.0 {
                            let dkr = &mut dk[base + ci * cout..base + (ci + 1) * cout];
                            for co in 0..cout {
                                dkr[co] += v * go[co];
                            }
                        }
                    }
                });
            }
        }
        (dx, dk, db)
    });
    let mut dx = Vec::with_capacity(g.b * plane_in);
    let mut dk = vec![0.0; ksize];
    let mut db = vec![0.0; cout];
    for (pdx, pdk, pdb) in parts {
        dx.extend_from_slice(&pdx);
        for (a, b) in dk.iter_mut().zip(&pdk) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(&pdb) {
            *a += b;
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(kernel.shape(), dk)?,
        Tensor::new(bias.shape(), db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_1x1_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 4, 3], 1.0, &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d(&x, &k, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_gives_bias_field() {
        let x = Tensor::full(&[1, 4, 4, 2], 3.0);
        let b = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &Tensor::zeros(&[3, 3, 2, 3]), &b).unwrap();
        for p in 0..16 {
            assert_eq!(&y.data()[p * 3..p * 3 + 3], b.data());
        }
    }

    #[test]
    fn averaging_kernel_on_2x2_is_hand_computed() {
        // x = [[1,2],[3,4]], each 3×3 window covers the full zero-padded 2×2
        // input, so every output is (1+2+3+4)/9.
        let x = Tensor::new(&[1, 2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        let k = Tensor::full(&[3, 3, 1, 1], 1.0 / 9.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1])).unwrap();
        for v in y.data() {
            assert!((v - 10.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 3, 1]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn linear_in_input_and_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x1 = Tensor::randn(&[1, 4, 5, 2], 1.0, &mut rng);
        let x2 = Tensor::randn(&[1, 4, 5, 2], 1.0, &mut rng);
        let k1 = Tensor::randn(&[3, 3, 2, 2], 1.0, &mut rng);
        let k2 = Tensor::randn(&[3, 3, 2, 2], 1.0, &mut rng);
        let z = Tensor::zeros(&[2]);
        let lhs = conv2d(&x1.scale(2.0).add(&x2.scale(-0.5)).unwrap(), &k1, &z).unwrap();
        let mut rhs = conv2d(&x1, &k1, &z).unwrap().scale(2.0);
        rhs.axpy(-0.5, &conv2d(&x2, &k1, &z).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        let lhs = conv2d(&x1, &k1.add(&k2).unwrap(), &z).unwrap();
        let rhs = conv2d(&x1, &k1, &z).unwrap().add(&conv2d(&x1, &k2, &z).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn backward_matches_inner_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[2, 3, 4, 2], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 3, 2, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let g = Tensor::randn(&[2, 3, 4, 3], 1.0, &mut rng);
        let (dx, dk, db) = conv2d_backward(&x, &k, &b, &g).unwrap();
        let zb = Tensor::zeros(&[3]);
        // conv is linear in x (bias zero) and in k
        let lhs = conv2d(&x, &k, &zb).unwrap().mul(&g).unwrap().sum();
        assert!((lhs - x.mul(&dx).unwrap().sum()).abs() < 1e-10);
        assert!((lhs - k.mul(&dk).unwrap().sum()).abs() < 1e-10);
        let gsum: Vec<f64> = (0..3)
            .map(|c| g.data().iter().skip(c).step_by(3).sum())
            .collect();
        for c in 0..3 {
            assert!((db.data()[c] - gsum[c]).abs() < 1e-12);
        }
    }
}
