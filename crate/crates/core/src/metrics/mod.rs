//! Image-quality metrics and the Fréchet-distance proxy (pFID).
//!
//! pFID fits a Gaussian to a fixed, training-free feature map (bicubic
//! downsample to 8×8, flattened) and compares two sets with the Fréchet
//! distance. Numbers are comparable across runs of this crate only.

pub mod linalg;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degradation::{cubic_resize_raw, Image};
use crate::error::{Error, Result};

use self::linalg::{sqrtm_psd, trace_sqrt_psd, Matrix};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const FEATURE_SIDE: usize = 8;
pub const FEATURE_DIM: usize = FEATURE_SIDE * FEATURE_SIDE;
/// Sets smaller than this give singular covariances in 64 dimensions.
pub const PFID_MIN_SET: usize = FEATURE_DIM + 1;

fn check_dims(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for peak 1.0, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b, "psnr")?;
    let mse = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.pixels.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM over non-overlapping 8×8 windows (all channels).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b, "ssim")?;
    let win = SSIM_WINDOW;
    if a.height < win || a.width < win {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {win}x{win}, got {}x{}",
            a.height, a.width
        )));
    }
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for wy in 0..a.height / win {
            for wx in 0..a.width / win {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in wy * win..(wy + 1) * win {
                    for x in wx * win..(wx + 1) * win {
                        let (u, v) = (pa[y * a.width + x] as f64, pb[y * a.width + x] as f64);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Fixed 64-d feature: channel mean, bicubic resize to 8×8, flatten.
pub fn feature_extract(img: &Image) -> Result<Vec<f64>> {
    if img.height < FEATURE_SIDE || img.width < FEATURE_SIDE {
        return Err(Error::InvalidArgument(format!(
            "feature map needs at least {FEATURE_SIDE}x{FEATURE_SIDE}"
        )));
    }
    let hw = img.height * img.width;
    let gray: Vec<f32> = (0..hw)
        .map(|i| (0..img.channels).map(|c| img.pixels[c * hw + i]).sum::<f32>() / img.channels as f32)
        .collect();
    let gray = Image::new(1, img.height, img.width, gray)?;
    let small = cubic_resize_raw(&gray, FEATURE_SIDE, FEATURE_SIDE)?;
    Ok(small.pixels.iter().map(|&v| v as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mu: Vec<f64>,
    pub cov: Matrix,
}

/// Sample mean and unbiased (n − 1) covariance, symmetrized.
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<GaussianFit> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("gaussian_fit needs >= 2 samples, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::InvalidArgument("feature vectors differ in length".into()));
    }
    let mut mu = vec![0.0; d];
    for f in features {
        mu.iter_mut().zip(f).for_each(|(m, x)| *m += x);
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(d);
    for f in features {
        for i in 0..d {
            let di = f[i] - mu[i];
            for j in i..d {
                cov.data[i * d + j] += di * (f[j] - mu[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov.data[i * d + j] / (n - 1) as f64;
            cov.data[i * d + j] = v;
            cov.data[j * d + i] = v;
        }
    }
    Ok(GaussianFit { mu, cov })
}

/// `‖μ₁ − μ₂‖² + Tr(C₁ + C₂ − 2(C₁^{1/2} C₂ C₁^{1/2})^{1/2})`, clamped at 0.
pub fn frechet_distance(g1: &GaussianFit, g2: &GaussianFit) -> Result<f64> {
    if g1.mu.len() != g2.mu.len() || g1.cov.n != g2.cov.n || g1.cov.n != g1.mu.len() {
        return Err(Error::ShapeMismatch {
            op: "frechet_distance",
            lhs: vec![g1.mu.len(), g1.cov.n],
            rhs: vec![g2.mu.len(), g2.cov.n],
        });
    }
    let mean_term: f64 = g1.mu.iter().zip(&g2.mu).map(|(a, b)| (a - b) * (a - b)).sum();
    let s1 = sqrtm_psd(&g1.cov)?;
    let inner = s1.matmul(&g2.cov).matmul(&s1).symmetrized();
    let cross = trace_sqrt_psd(&inner)?;
    let d = mean_term + g1.cov.trace() + g2.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Fréchet distance between Gaussian fits of the two sets' features.
pub fn pfid(set_a: &[Image], set_b: &[Image]) -> Result<f64> {
    for (name, set) in [("first", set_a), ("second", set_b)] {
        if set.len() < PFID_MIN_SET {
            return Err(Error::InvalidArgument(format!(
                "pfid: {name} set has {} images, need >= {PFID_MIN_SET}",
                set.len()
            )));
        }
    }
    let fa = set_a.par_iter().map(feature_extract).collect::<Result<Vec<_>>>()?;
    let fb = set_b.par_iter().map(feature_extract).collect::<Result<Vec<_>>>()?;
    frechet_distance(&gaussian_fit(&fa)?, &gaussian_fit(&fb)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub pfid: f64,
    pub n_samples: usize,
}

/// Mean PSNR/SSIM over aligned pairs plus pFID between the two sets.
pub fn evaluate_sets(outputs: &[Image], references: &[Image]) -> Result<MetricReport> {
    if outputs.len() != references.len() || outputs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "evaluate_sets: {} outputs vs {} references",
            outputs.len(),
            references.len()
        )));
    }
    // Per-image scores are computed in parallel but summed in order, so the
    // result does not depend on the thread count.
    let scores = outputs
        .par_iter()
        .zip(references)
        .map(|(o, r)| Ok((psnr(o, r)?, ssim(o, r)?)))
        .collect::<Result<Vec<_>>>()?;
    let n = outputs.len() as f64;
    let (p, s) = scores.iter().fold((0.0, 0.0), |(p, s), (a, b)| (p + a, s + b));
    Ok(MetricReport {
        psnr_db: p / n,
        ssim: s / n,
        pfid: pfid(outputs, references)?,
        n_samples: outputs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::gen_texture;

    fn img(v: impl Fn(usize) -> f32, h: usize, w: usize) -> Image {
        Image::new(1, h, w, (0..h * w).map(v).collect()).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = img(|i| 0.3 + 0.5 * ((i % 7) as f32 / 7.0), 16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        assert!((psnr(&a, &a.offset(0.1)).unwrap() - 20.0).abs() < 1e-5);
        assert!((psnr(&a, &a.offset(0.01)).unwrap() - 40.0).abs() < 1e-3);
        assert!(psnr(&a, &img(|_| 0.0, 8, 16)).is_err());
    }

    #[test]
    fn ssim_constant_patch_closed_form() {
        let a = Image::filled(1, 16, 16, 0.5);
        let b = Image::filled(1, 16, 16, 0.7);
        let want = (2.0 * 0.5 * 0.7 + 1e-4) / (0.25 + 0.49 + 1e-4);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert!((want - 0.94595).abs() < 1e-5);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_symmetric_on_textures() {
        let a = gen_texture(1, 32, 32);
        let b = gen_texture(2, 32, 32);
        let (x, y) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((x - y).abs() < 1e-12);
        assert!(ssim(&a, &a).unwrap() > x);
    }

    #[test]
    fn features_of_constant_and_native_size() {
        let c = Image::filled(1, 32, 32, 0.42);
        assert!(feature_extract(&c).unwrap().iter().all(|&v| (v - 0.42).abs() < 1e-6));
        let small = img(|i| i as f32 / 64.0, 8, 8);
        let f = feature_extract(&small).unwrap();
        for (a, b) in f.iter().zip(&small.pixels) {
            assert_eq!(*a, *b as f64);
        }
    }

    #[test]
    fn fit_of_symmetric_pair() {
        let u = vec![1.0, -2.0, 0.5];
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        let g = gaussian_fit(&[u.clone(), neg]).unwrap();
        assert!(g.mu.iter().all(|&m| m == 0.0));
        for i in 0..3 {
            for j in 0..3 {
                assert!((g.cov.get(i, j) - 2.0 * u[i] * u[j]).abs() < 1e-12);
            }
        }
        let same = gaussian_fit(&[u.clone(), u.clone(), u]).unwrap();
        assert!(same.cov.data.iter().all(|&c| c == 0.0));
        assert!(gaussian_fit(&[vec![1.0]]).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let id = GaussianFit {
            mu: vec![0.0; 64],
            cov: Matrix::identity(64),
        };
        assert!(frechet_distance(&id, &id).unwrap() < 1e-6);
        let mut shifted = id.clone();
        shifted.mu[0] = 3.0;
        assert!((frechet_distance(&id, &shifted).unwrap() - 9.0).abs() < 1e-9);

        let c1: Vec<f64> = (0..10).map(|i| 0.1 + i as f64).collect();
        let c2: Vec<f64> = (0..10).map(|i| 2.0 / (1.0 + i as f64)).collect();
        let g1 = GaussianFit {
            mu: vec![0.5; 10],
            cov: Matrix::diag(&c1),
        };
        let g2 = GaussianFit {
            mu: vec![0.5; 10],
            cov: Matrix::diag(&c2),
        };
        let want: f64 = c1.iter().zip(&c2).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
        let got = frechet_distance(&g1, &g2).unwrap();
        assert!((got - want).abs() < 1e-9 * want.max(1.0));
        assert!(frechet_distance(&g1, &id).is_err());
    }

    #[test]
    fn pfid_requires_enough_images() {
        let set: Vec<Image> = (0..10).map(|s| gen_texture(s, 16, 16)).collect();
        assert!(pfid(&set, &set).is_err());
    }
}
