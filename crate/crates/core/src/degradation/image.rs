use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Planar image with values in `[0, 1]`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                op: "Image::new",
                lhs: vec![channels, height, width],
                rhs: vec![pixels.len()],
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            pixels: vec![value; channels * height * width],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.pixels[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn clamp01(&mut self) {
        self.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        Tensor::from_fn(self.dims(), |i| E::from_f64_lossy(self.pixels[i] as f64))
    }

    /// Interprets a `[C, H, W]` tensor as an image, clamping into `[0, 1]`.
    pub fn from_tensor<E: Element>(t: &Tensor<E>) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Ok(Self {
                channels: c,
                height: h,
                width: w,
                pixels: t.data().iter().map(|v| (v.as_f64() as f32).clamp(0.0, 1.0)).collect(),
            }),
            _ => Err(Error::ShapeMismatch {
                op: "Image::from_tensor",
                lhs: t.shape().to_vec(),
                rhs: vec![0, 0, 0],
            }),
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Adds `delta` to every pixel without clamping.
    pub fn offset(&self, delta: f32) -> Self {
        Self {
            pixels: self.pixels.iter().map(|v| v + delta).collect(),
            ..self.clone()
        }
    }
}
