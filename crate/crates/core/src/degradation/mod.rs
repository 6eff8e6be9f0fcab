//! LR/HR pair synthesis: bicubic resampling, the degrade / resize-like pair
//! used by every training loop, and the procedural texture corpus.

mod image;
mod io;
mod resample;
mod texture;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::image::Image;
pub use self::io::{quantize_u8, read_image, read_pgm, read_png, write_image, write_pgm, write_png, ImageFormat};
pub use self::resample::{bicubic_resize, cubic_resize_raw, cubic_weight, cubic_weights, gaussian_blur, KEYS_A};
pub use self::texture::gen_texture;

/// Magnification factor between HR and LR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct ScaleFactor(u32);

impl ScaleFactor {
    pub const ALLOWED: [u32; 3] = [2, 4, 8];

    pub fn new(s: u32) -> Result<Self> {
        if Self::ALLOWED.contains(&s) {
            Ok(Self(s))
        } else {
            Err(Error::InvalidArgument(format!("scale factor {s} not in {{2, 4, 8}}")))
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn usize(self) -> usize {
        self.0 as usize
    }
}

impl TryFrom<u32> for ScaleFactor {
    type Error = Error;
    fn try_from(s: u32) -> Result<Self> {
        Self::new(s)
    }
}

impl From<ScaleFactor> for u32 {
    fn from(s: ScaleFactor) -> u32 {
        s.0
    }
}

impl std::fmt::Display for ScaleFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "x{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiteParams {
    pub blur_sigma_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
}

impl Default for LiteParams {
    fn default() -> Self {
        Self {
            blur_sigma_range: [0.2, 1.0],
            noise_sigma_range: [0.0, 0.05],
        }
    }
}

impl LiteParams {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("blur", self.blur_sigma_range), ("noise", self.noise_sigma_range)] {
            if !(lo >= 0.0 && lo <= hi) {
                return Err(Error::InvalidArgument(format!("{name} sigma range [{lo}, {hi}] invalid")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DegradeMode {
    #[default]
    Bicubic,
    /// Blur, bicubic downsample, additive Gaussian noise.
    Lite(LiteParams),
}

impl DegradeMode {
    /// Whether the output depends on the seed.
    pub fn is_stochastic(&self) -> bool {
        matches!(self, DegradeMode::Lite(_))
    }
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Produces the LR observation of `x_h` at magnification `s`.
pub fn degrade(x_h: &Image, s: ScaleFactor, mode: &DegradeMode, rng_seed: u64) -> Result<Image> {
    let f = s.usize();
    if x_h.height % f != 0 || x_h.width % f != 0 {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image not divisible by scale {}",
            x_h.height, x_h.width, f
        )));
    }
    let (oh, ow) = (x_h.height / f, x_h.width / f);
    match mode {
        DegradeMode::Bicubic => bicubic_resize(x_h, oh, ow),
        DegradeMode::Lite(p) => {
            p.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let blur = draw(&mut rng, p.blur_sigma_range);
            let noise = draw(&mut rng, p.noise_sigma_range);
            let blurred = gaussian_blur(x_h, blur);
            let mut lr = cubic_resize_raw(&blurred, oh, ow)?;
            if noise > 0.0 {
                let normal = Normal::new(0.0, noise).expect("finite sigma");
                for v in lr.pixels.iter_mut() {
                    *v += normal.sample(&mut rng) as f32;
                }
            }
            lr.clamp01();
            Ok(lr)
        }
    }
}

/// Bicubic resize of `x_l` to the dimensions of `x_h`.
pub fn resize_like(x_l: &Image, x_h: &Image) -> Result<Image> {
    bicubic_resize(x_l, x_h.height, x_h.width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degrade_shapes_and_determinism() {
        let img = gen_texture(3, 64, 64);
        let s4 = ScaleFactor::new(4).unwrap();
        let lr = degrade(&img, s4, &DegradeMode::Bicubic, 0).unwrap();
        assert_eq!((lr.height, lr.width), (16, 16));
        let lite = DegradeMode::Lite(LiteParams::default());
        let a = degrade(&img, s4, &lite, 11).unwrap();
        let b = degrade(&img, s4, &lite, 11).unwrap();
        let c = degrade(&img, s4, &lite, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        for s in [2, 4, 8] {
            let out = degrade(&img, ScaleFactor::new(s).unwrap(), &lite, 5).unwrap();
            assert_eq!((out.height, out.width), (64 / s as usize, 64 / s as usize));
        }
    }

    #[test]
    fn degrade_constant_image_bicubic() {
        let img = Image::filled(1, 32, 32, 0.37);
        let lr = degrade(&img, ScaleFactor::new(8).unwrap(), &DegradeMode::Bicubic, 0).unwrap();
        assert!(lr.pixels.iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn degrade_rejects_indivisible() {
        let img = Image::filled(1, 30, 32, 0.5);
        assert!(degrade(&img, ScaleFactor::new(4).unwrap(), &DegradeMode::Bicubic, 0).is_err());
        assert!(ScaleFactor::new(3).is_err());
    }

    #[test]
    fn resize_like_shapes() {
        let hr = gen_texture(1, 64, 64);
        let lr = degrade(&hr, ScaleFactor::new(4).unwrap(), &DegradeMode::Bicubic, 0).unwrap();
        let up = resize_like(&lr, &hr).unwrap();
        assert_eq!((up.height, up.width), (64, 64));
        assert_eq!(resize_like(&hr, &hr).unwrap(), hr);
        let c = Image::filled(1, 16, 16, 0.25);
        let up = resize_like(&c, &hr).unwrap();
        assert!(up.pixels.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn lite_params_validate() {
        let bad = LiteParams {
            blur_sigma_range: [1.0, 0.5],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LiteParams {
            noise_sigma_range: [-0.1, 0.5],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
