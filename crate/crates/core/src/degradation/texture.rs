use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::resample::gaussian_blur;
use super::Image;

/// Deterministic single-channel texture: 2–4 sinusoidal gratings (period
/// 2–16 px), one random-threshold checkerboard (cell 2–8 px) and low-pass
/// Gaussian noise, min-max normalized to `[0, 1]`.
pub fn gen_texture(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0f64; h * w];

    let gratings = rng.gen_range(2..=4);
    for _ in 0..gratings {
        let period: f64 = rng.gen_range(2.0..16.0);
        let theta: f64 = rng.gen_range(0.0..PI);
        let phase: f64 = rng.gen_range(0.0..2.0 * PI);
        let amp: f64 = rng.gen_range(0.5..1.0);
        let (kx, ky) = (2.0 * PI / period * theta.cos(), 2.0 * PI / period * theta.sin());
        for y in 0..h {
            for x in 0..w {
                acc[y * w + x] += amp * (kx * x as f64 + ky * y as f64 + phase).sin();
            }
        }
    }

    let cell = rng.gen_range(2..=8usize);
    let threshold: f64 = rng.gen_range(0.3..0.7);
    let amp: f64 = rng.gen_range(0.5..1.0);
    let (ox, oy) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
    let (cells_y, cells_x) = ((h + oy) / cell + 1, (w + ox) / cell + 1);
    let on: Vec<bool> = (0..cells_y * cells_x).map(|_| rng.gen::<f64>() > threshold).collect();
    for y in 0..h {
        for x in 0..w {
            let c = ((y + oy) / cell) * cells_x + (x + ox) / cell;
            acc[y * w + x] += if on[c] { amp } else { -amp };
        }
    }

    let noise_sigma: f64 = rng.gen_range(1.0..3.0);
    let noise_amp: f64 = rng.gen_range(0.5..1.5);
    let raw: Vec<f32> = (0..h * w).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    let smooth = gaussian_blur(&Image::new(1, h, w, raw).expect("sized"), noise_sigma);
    // Blurring shrinks the variance roughly by 1/(4πσ²); undo that.
    let gain = noise_amp * (4.0 * PI).sqrt() * noise_sigma;
    for (a, &n) in acc.iter_mut().zip(&smooth.pixels) {
        *a += gain * n as f64;
    }

    let (lo, hi) = acc
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels = acc.iter().map(|&v| ((v - lo) / span) as f32).collect();
    Image::new(1, h, w, pixels).expect("sized")
}
