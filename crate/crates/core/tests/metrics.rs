use std::path::Path;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wfno_core::diffusion::degrade;
use wfno_core::metrics::{bench, bicubic_baseline, compare, psnr, psnr_text, ssim};
use wfno_core::tensor::load_image;
use wfno_core::Image;

fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..h * w * c).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
    Image::new(h, w, c, v).unwrap()
}

fn noisy(img: &Image, sigma: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    let v = img.values().iter().map(|x| x + sigma * n.sample(&mut rng)).collect();
    Image::new(img.height(), img.width(), img.channels(), v).unwrap()
}

#[test]
fn psnr_falls_as_noise_grows() {
    let a = random_image(16, 16, 3, 1);
    let scores: Vec<f64> = [0.01, 0.05, 0.2].iter().map(|&s| psnr(&noisy(&a, s, 2), &a).unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[1] < w[0]), "{scores:?}");
}

#[test]
fn identical_images_hit_the_caps() {
    let a = random_image(12, 12, 3, 4);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    assert_eq!(psnr_text(f64::INFINITY), "99.00");
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    let r = compare(&a, &a, true).unwrap();
    assert_eq!(r.ssim, Some(1.0));
}

#[test]
fn checkerboard_against_its_inverse_is_anticorrelated() {
    let v: Vec<f64> = (0..16 * 16).map(|i| ((i / 16 + i % 16) % 2) as f64).collect();
    let a = Image::new(16, 16, 1, v.clone()).unwrap();
    let b = Image::new(16, 16, 1, v.iter().map(|x| 1.0 - x).collect()).unwrap();
    assert!(ssim(&a, &b).unwrap() < 0.0);
}

#[test]
fn ssim_needs_a_full_window() {
    let a = random_image(10, 20, 1, 0);
    assert!(ssim(&a, &a).is_err());
    assert!(psnr(&a, &random_image(10, 19, 1, 0)).is_err());
}

#[test]
fn bicubic_round_trip_on_bundled_patch() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/desk/desk_00.png");
    let hr = load_image(path).unwrap();
    let lr = degrade(&hr, 2.0).unwrap();
    assert_eq!((lr.height(), lr.width()), (16, 16));
    let up = bicubic_baseline(&lr, 2.0).unwrap();
    let db = psnr(&up, &hr).unwrap();
    // regression constant of the deterministic kernel
    assert!((db - BICUBIC_X2_DESK_00).abs() < 1e-9, "{db}");
}

const BICUBIC_X2_DESK_00: f64 = 33.854568585123864;

#[test]
fn bench_statistics_are_consistent() {
    let mut k = 0u64;
    let t = bench(7, || {
        k += 1;
        std::hint::black_box((0..2000 * k).sum::<u64>());
        Ok(3)
    })
    .unwrap();
    assert_eq!(t.runs, 7);
    assert_eq!(t.nfe, 3);
    assert!(t.min_ms <= t.mean_ms && t.mean_ms <= t.max_ms);
    let one = bench(1, || Ok(0)).unwrap();
    assert_eq!(one.std_ms, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn psnr_ignores_shared_pixel_permutation(seed in 0u64..100_000) {
        let a = random_image(6, 7, 3, seed);
        let b = noisy(&a, 0.1, seed + 1);
        let mut order: Vec<usize> = (0..42).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permute = |img: &Image| {
            let v = order.iter().flat_map(|&p| img.values()[p * 3..p * 3 + 3].to_vec()).collect();
            Image::new(6, 7, 3, v).unwrap()
        };
        let d = psnr(&permute(&a), &permute(&b)).unwrap() - psnr(&a, &b).unwrap();
        prop_assert!(d.abs() <= 1e-10);
    }

    #[test]
    fn ssim_is_bounded_and_symmetric(seed in 0u64..100_000, sigma in 0.0f64..0.5) {
        let a = random_image(13, 12, 3, seed);
        let b = Image::new(13, 12, 3, noisy(&a, sigma, seed + 7).values().iter().map(|v| v.clamp(0.0, 1.0)).collect()).unwrap();
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() <= 1e-12);
    }
}
