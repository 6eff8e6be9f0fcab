use crate::error::{Error, Result};

use super::Image;

/// Keys cubic-convolution constant.
pub const KEYS_A: f64 = -0.5;

/// Keys cubic convolution kernel `W(x)` with `a = −0.5`.
pub fn cubic_weight(x: f64) -> f64 {
    let a = KEYS_A;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Weights of taps `⌊s⌋−1 … ⌊s⌋+2` for fractional offset `frac = s − ⌊s⌋`.
pub fn cubic_weights(frac: f64) -> [f64; 4] {
    [
        cubic_weight(1.0 + frac),
        cubic_weight(frac),
        cubic_weight(1.0 - frac),
        cubic_weight(2.0 - frac),
    ]
}

struct Taps {
    index: Vec<[usize; 4]>,
    weight: Vec<[f64; 4]>,
}

fn taps(n_in: usize, n_out: usize) -> Taps {
    let ratio = n_in as f64 / n_out as f64;
    let last = n_in as isize - 1;
    let mut index = Vec::with_capacity(n_out);
    let mut weight = Vec::with_capacity(n_out);
    for d in 0..n_out {
        let src = (d as f64 + 0.5) * ratio - 0.5;
        let base = src.floor();
        let frac = src - base;
        let base = base as isize;
        index.push(std::array::from_fn(|k| (base - 1 + k as isize).clamp(0, last) as usize));
        weight.push(cubic_weights(frac));
    }
    Taps { index, weight }
}

/// Separable bicubic resize without the final clamp. Ringing from the
/// negative kernel lobes is preserved.
pub fn cubic_resize_raw(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 || img.height == 0 || img.width == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize {}x{} -> {out_h}x{out_w}",
            img.height, img.width
        )));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let (h, w) = (img.height, img.width);
    let tx = taps(w, out_w);
    let ty = taps(h, out_h);
    let mut out = Vec::with_capacity(img.channels * out_h * out_w);
    let mut rows = vec![0.0f64; h * out_w];
    for c in 0..img.channels {
        let plane = img.plane(c);
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            for x in 0..out_w {
                let (i, k) = (&tx.index[x], &tx.weight[x]);
                rows[y * out_w + x] = (0..4).map(|j| src[i[j]] as f64 * k[j]).sum();
            }
        }
        for y in 0..out_h {
            let (i, k) = (&ty.index[y], &ty.weight[y]);
            for x in 0..out_w {
                let v: f64 = (0..4).map(|j| rows[i[j] * out_w + x] * k[j]).sum();
                out.push(v as f32);
            }
        }
    }
    Image::new(img.channels, out_h, out_w, out)
}

/// Bicubic resize (Keys `a = −0.5`, half-pixel centres, clamp-to-edge),
/// output clamped to `[0, 1]`.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    let mut out = cubic_resize_raw(img, out_h, out_w)?;
    out.clamp01();
    Ok(out)
}

/// Separable Gaussian blur, radius `⌈3σ⌉`, clamp-to-edge.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (img.height as isize, img.width as isize);
    let mut out = img.clone();
    let mut tmp = vec![0.0f64; (h * w) as usize];
    for c in 0..img.channels {
        let plane = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[(y * w + x) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wt)| {
                        let sx = (x + k as isize - radius).clamp(0, w - 1);
                        plane[(y * w + sx) as usize] as f64 * wt
                    })
                    .sum();
            }
        }
        let dst = &mut out.pixels[c * (h * w) as usize..(c + 1) * (h * w) as usize];
        for y in 0..h {
            for x in 0..w {
                dst[(y * w + x) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wt)| {
                        let sy = (y + k as isize - radius).clamp(0, h - 1);
                        tmp[(sy * w + x) as usize] * wt
                    })
                    .sum::<f64>() as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn weights_partition_unity(frac in 0.0f64..1.0) {
            let s: f64 = cubic_weights(frac).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn constant_images_survive_any_resize(v in 0.0f32..1.0, oh in 1usize..40, ow in 1usize..40) {
            let img = Image::filled(1, 12, 20, v);
            let out = cubic_resize_raw(&img, oh, ow).unwrap();
            prop_assert!(out.pixels.iter().all(|p| (p - v).abs() < 1e-6));
        }
    }

    #[test]
    fn kernel_hits_samples_at_integer_offsets() {
        assert_eq!(cubic_weights(0.0), [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(cubic_weight(2.0), 0.0);
    }

    #[test]
    fn blur_preserves_constants_and_mean() {
        let img = Image::filled(1, 9, 9, 0.4);
        let b = gaussian_blur(&img, 0.8);
        assert!(b.pixels.iter().all(|p| (p - 0.4).abs() < 1e-6));
    }

    #[test]
    fn rejects_zero_dims() {
        let img = Image::filled(1, 4, 4, 0.0);
        assert!(bicubic_resize(&img, 0, 4).is_err());
    }
}
