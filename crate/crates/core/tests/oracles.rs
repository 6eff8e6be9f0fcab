//! Independent oracles for derived constants: each expected value is
//! computed here from first principles (or frozen from a hand derivation),
//! never by calling the code under test.

use std::f64::consts::PI;

use scaledistill::degradation::{
    cubic_resize_raw, degrade, gen_texture, resize_like, bicubic_resize, DegradeMode, Image, ScaleFactor,
};
use scaledistill::diffusion::{add_noise, from_v, v_target, NoiseSchedule};
use scaledistill::metrics::{pfid, psnr};
use scaledistill::unet::{DenoiserNet, NetworkConfig};
use scaledistill::Tensor;

#[test]
fn bicubic_upsample_of_unit_impulse_matches_hand_derivation() {
    // Keys a = -1/2, half-pixel centres, clamp-to-edge. Output d samples
    // src = d/2 - 1/4, so fractional offsets alternate 3/4 and 1/4 and every
    // weight is a dyadic rational: the values are exact in binary.
    let row = Image::new(1, 1, 4, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
    let want = [-9.0, 29.0, 111.0, 111.0, 29.0, -9.0, -3.0, 0.0].map(|v: f64| v / 128.0);
    let raw = cubic_resize_raw(&row, 1, 8).unwrap();
    for (got, w) in raw.pixels.iter().zip(want) {
        assert_eq!(*got as f64, w);
    }
    let clamped = bicubic_resize(&row, 1, 8).unwrap();
    for (got, w) in clamped.pixels.iter().zip(want) {
        assert_eq!(*got as f64, w.clamp(0.0, 1.0));
    }
}

/// Fraction of non-DC spectral power at frequencies above `cutoff` rad/px
/// (on either axis), by a direct O(n⁴) DFT.
fn high_frequency_fraction(img: &Image, cutoff: f64) -> f64 {
    let (h, w) = (img.height, img.width);
    let mean = img.pixels.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
    let (mut high, mut total) = (0.0, 0.0);
    for ky in 0..h {
        for kx in 0..w {
            if kx == 0 && ky == 0 {
                continue;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let v = img.pixels[y * w + x] as f64 - mean;
                    let ph = -2.0 * PI * (kx as f64 * x as f64 / w as f64 + ky as f64 * y as f64 / h as f64);
                    re += v * ph.cos();
                    im += v * ph.sin();
                }
            }
            let p = re * re + im * im;
            let fx = 2.0 * PI * (kx.min(w - kx) as f64) / w as f64;
            let fy = 2.0 * PI * (ky.min(h - ky) as f64) / h as f64;
            total += p;
            if fx.max(fy) > cutoff {
                high += p;
            }
        }
    }
    high / total
}

#[test]
fn textures_carry_energy_above_the_x8_nyquist_limit() {
    // An s = 8 downsample keeps frequencies up to π/8 rad/px.
    let mut worst = f64::INFINITY;
    for seed in 0..100 {
        let frac = high_frequency_fraction(&gen_texture(seed, 16, 16), PI / 8.0);
        worst = worst.min(frac);
    }
    assert!(worst > 0.01, "least high-frequency texture keeps only {worst:.4} of its power");
}

#[test]
fn milder_degradation_keeps_more_information() {
    let mut mean = [0.0; 3];
    let n = 100;
    for seed in 0..n {
        let x = gen_texture(1000 + seed, 32, 32);
        for (slot, s) in [2, 4, 8].into_iter().enumerate() {
            let lr = degrade(&x, ScaleFactor::new(s).unwrap(), &DegradeMode::Bicubic, 0).unwrap();
            mean[slot] += psnr(&resize_like(&lr, &x).unwrap(), &x).unwrap() / n as f64;
        }
    }
    assert!(mean[0] > mean[1] && mean[1] > mean[2], "{mean:?}");
}

fn conv(ci: usize, co: usize, k: usize) -> usize {
    co * ci * k * k + co
}

fn linear(i: usize, o: usize) -> usize {
    o * i + o
}

fn res(ci: usize, co: usize, temb: usize) -> usize {
    let skip = if ci != co { conv(ci, co, 1) } else { 0 };
    2 * ci + conv(ci, co, 3) + linear(temb, co) + 2 * co + conv(co, co, 3) + skip
}

/// Parameter count of the U-Net described by `c`, layer by layer.
fn analytic_params(c: &NetworkConfig) -> usize {
    let w = (c.base_channels as f64 * c.width_scale).round() as usize;
    let chans: Vec<usize> = c.channel_mult.iter().map(|m| m * w).collect();
    let t = c.time_embed_dim;
    let mut n = 2 * linear(t, t) + conv(c.in_channels, chans[0], 3);
    let mut prev = chans[0];
    for &ch in &chans {
        n += res(prev, ch, t) + conv(ch, ch, 3);
        prev = ch;
    }
    n += res(prev, prev, t);
    for &ch in chans.iter().rev() {
        n += conv(prev, prev, 3) + res(prev + ch, ch, t);
        prev = ch;
    }
    n + 2 * prev + conv(prev, c.out_channels, 3)
}

#[test]
fn half_width_model_has_about_a_quarter_of_the_parameters() {
    let full = NetworkConfig::default();
    let half = full.with_width_scale(0.5);
    let (nf, nh) = (analytic_params(&full), analytic_params(&half));
    assert_eq!(DenoiserNet::<f32>::build(&full, 0).unwrap().param_count(), nf);
    assert_eq!(DenoiserNet::<f32>::build(&half, 0).unwrap().param_count(), nh);
    let ratio = nh as f64 / nf as f64;
    assert!(ratio > 0.2 && ratio < 0.35, "ratio {ratio}");
}

#[test]
fn brightness_shift_moves_pfid_by_the_mean_term() {
    // Features are a linear resample of the pixels, so +0.2 everywhere
    // shifts all 64 feature means by 0.2 and leaves covariances alone:
    // distance = 64 · 0.2² = 2.56.
    let a: Vec<Image> = (0..80).map(|s| gen_texture(500 + s, 32, 32)).collect();
    let b: Vec<Image> = a.iter().map(|x| x.offset(0.2)).collect();
    let d = pfid(&a, &b).unwrap();
    assert!((d - 2.56).abs() < 1e-3, "pfid {d}");
    assert!((pfid(&b, &a).unwrap() - d).abs() < 1e-6);
}

#[test]
fn weighted_x_loss_equals_v_loss() {
    let cfg = NetworkConfig {
        base_channels: 8,
        ..Default::default()
    };
    let mut net = DenoiserNet::<f64>::build(&cfg, 3).unwrap();
    // The output conv starts at zero; give it weights so v̂ is non-trivial.
    for (name, t) in net.params.iter_mut() {
        if name.starts_with("out.conv") {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 7919) % 13) as f64 * 0.01 - 0.06);
        }
    }
    let sched = NoiseSchedule::default();
    let z_h = Tensor::<f64>::from_fn([2, 8, 8], |i| (i as f64 * 0.37).sin());
    let z_l = Tensor::<f64>::from_fn([2, 8, 8], |i| (i as f64 * 0.11).cos());
    let eps = Tensor::<f64>::from_fn([2, 8, 8], |i| ((i * 31 % 17) as f64 - 8.0) / 5.0);
    for t in [0.05, 0.3, 0.5, 0.77, 0.95] {
        let z_t = add_noise(&z_h, &eps, t, &sched).unwrap();
        let v = v_target(&z_h, &eps, t, &sched).unwrap();
        let v_hat = net.forward_denoiser(&z_t, &z_l, t).unwrap();
        let (x_hat, _) = from_v(&z_t, &v_hat, t, &sched).unwrap();
        let (a, s) = ((PI * t / 2.0).cos(), (PI * t / 2.0).sin());
        let omega = 1.0 + a * a / (s * s);
        let n = z_h.len() as f64;
        let x_loss: f64 = x_hat.data().iter().zip(z_h.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n;
        let v_loss: f64 = v_hat.data().iter().zip(v.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n;
        assert!(((omega * x_loss - v_loss) / v_loss).abs() < 1e-5, "t={t}: {} vs {v_loss}", omega * x_loss);
    }
}
