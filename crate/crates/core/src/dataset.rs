//! Image patch collections and the procedural desk textures.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{load_image, Image};

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "ppm" || e == "pnm"
    )
}

/// Every PNG/PPM file directly inside `dir`, sorted by file name.
pub fn image_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && is_image(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Load every image in `dir` as RGB.
pub fn load_patches(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let files = image_files(&dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset);
    }
    files.iter().map(|p| load_image(p).map(|i| i.to_rgb())).collect()
}

/// Seeded shuffle of `0..n` split into (train, validation). At least one
/// item goes to each side when `n ≥ 2` and `val_fraction > 0`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (n as f64 * val_fraction.clamp(0.0, 1.0)).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear-interpolated lattice noise with smoothstep fade, periodic in the lattice.
fn value_noise(lattice: &[f64], cells: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (smooth(x - x0), smooth(y - y0));
    let at = |i: f64, j: f64| {
        let i = (i as i64).rem_euclid(cells as i64) as usize;
        let j = (j as i64).rem_euclid(cells as i64) as usize;
        lattice[i * cells + j]
    };
    let a = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let b = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    a * (1.0 - fy) + b * fy
}

/// A `size × size` RGB texture: three octaves of value noise per channel
/// plus a few hard-edged half-plane steps.
pub fn desk_patch(seed: u64, size: usize) -> Result<Image> {
    if size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; size * size * 3];
    let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    for (c, b) in base.iter().enumerate() {
        let mut amp = 0.35;
        let mut cells = 4;
        for _ in 0..3 {
            let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.random::<f64>() - 0.5).collect();
            let s = cells as f64 / size as f64;
            for i in 0..size {
                for j in 0..size {
                    values[(i * size + j) * 3 + c] +=
                        amp * value_noise(&lattice, cells, j as f64 * s, i as f64 * s);
                }
            }
            amp *= 0.5;
            cells *= 2;
        }
        for i in 0..size * size {
            values[i * 3 + c] += b - 0.5;
        }
    }
    let edges = rng.random_range(1..=3);
    for _ in 0..edges {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (nx, ny) = (angle.cos(), angle.sin());
        let offset = rng.random_range(0.25..0.75) * size as f64;
        let jump: [f64; 3] = [
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        ];
        let cx = size as f64 / 2.0;
        for i in 0..size {
            for j in 0..size {
                let d = (j as f64 - cx) * nx + (i as f64 - cx) * ny + cx - offset;
                if d > 0.0 {
                    for c in 0..3 {
                        values[(i * size + j) * 3 + c] += jump[c];
                    }
                }
            }
        }
    }
    for v in &mut values {
        *v = (*v + 0.5).clamp(0.0, 1.0);
    }
    Image::new(size, size, 3, values)
}
