//! Deterministic DDIM sampling in v-form and the end-to-end SR pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autoencoder::Autoencoder;
use crate::degradation::{bicubic_resize, Image, ScaleFactor};
use crate::diffusion::{from_v, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::unet::DenoiserNet;

/// Anything that predicts `v` for a batch `[N, C, H, W]` at a shared time.
pub trait VPredictor<E: Element = f32> {
    fn predict_v(&self, z_t: &Tensor<E>, z_cond: &Tensor<E>, t: f64) -> Result<Tensor<E>>;

    fn is_frozen(&self) -> bool;
}

impl<E: Element> VPredictor<E> for DenoiserNet<E> {
    fn predict_v(&self, z_t: &Tensor<E>, z_cond: &Tensor<E>, t: f64) -> Result<Tensor<E>> {
        let n = z_t.shape().first().copied().unwrap_or(0);
        self.forward_batch(z_t, z_cond, &vec![t; n])
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }
}

impl<E: Element, P: VPredictor<E> + ?Sized> VPredictor<E> for &P {
    fn predict_v(&self, z_t: &Tensor<E>, z_cond: &Tensor<E>, t: f64) -> Result<Tensor<E>> {
        (**self).predict_v(z_t, z_cond, t)
    }

    fn is_frozen(&self) -> bool {
        (**self).is_frozen()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    pub sched: NoiseSchedule,
}

impl SamplerConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            seed,
            sched: NoiseSchedule::default(),
        }
    }
}

/// Uniform grid `t_k = 1 − k/K`, `k = 0..=K`.
pub fn ddim_timegrid(k: usize) -> Result<Vec<f64>> {
    if k < 1 {
        return Err(Error::InvalidArgument("DDIM needs at least one step".into()));
    }
    Ok((0..=k).map(|i| if i == k { 0.0 } else { 1.0 - i as f64 / k as f64 }).collect())
}

/// One deterministic DDIM update from `t_from` to `t_to`.
pub fn ddim_step<E: Element, P: VPredictor<E> + ?Sized>(
    net: &P,
    z_t: &Tensor<E>,
    z_l: &Tensor<E>,
    t_from: f64,
    t_to: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    if t_from <= t_to {
        return Err(Error::InvalidArgument(format!("DDIM step must go backwards in time: {t_from} -> {t_to}")));
    }
    let v_hat = net.predict_v(z_t, z_l, t_from)?;
    let (x_hat, eps_hat) = from_v(z_t, &v_hat, t_from, sched)?;
    let to = sched.eval(t_to)?;
    if to.sigma == 0.0 {
        return Ok(x_hat);
    }
    x_hat.axpby(E::from_f64_lossy(to.alpha), &eps_hat, E::from_f64_lossy(to.sigma))
}

/// Standard normal noise shaped like one sample, from `seed`.
pub fn initial_noise<E: Element>(shape: &[usize], seed: u64) -> Tensor<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        E::from_f64_lossy(v)
    })
}

/// Samples a batch; sample `i` starts from noise seeded by `seeds[i]`, so the
/// result does not depend on how samples are grouped into batches.
pub fn ddim_sample_batch<E: Element, P: VPredictor<E> + ?Sized>(
    net: &P,
    z_l: &Tensor<E>,
    seeds: &[u64],
    steps: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    if !net.is_frozen() {
        return Err(Error::Frozen("sampling requires a frozen denoiser".into()));
    }
    let shape = z_l.shape();
    if shape.len() != 4 || shape[0] != seeds.len() {
        return Err(Error::InvalidArgument(format!(
            "batch of shape {shape:?} with {} seeds",
            seeds.len()
        )));
    }
    let grid = ddim_timegrid(steps)?;
    let noise: Vec<Tensor<E>> = seeds.iter().map(|&s| initial_noise(&shape[1..], s)).collect();
    let mut z = Tensor::stack(&noise)?;
    for pair in grid.windows(2) {
        z = ddim_step(net, &z, z_l, pair[0], pair[1], sched)?;
    }
    Ok(z)
}

/// Samples one latent `[C, H, W]` conditioned on `z_l`.
pub fn ddim_sample<E: Element, P: VPredictor<E> + ?Sized>(
    net: &P,
    z_l: &Tensor<E>,
    cfg: &SamplerConfig,
) -> Result<Tensor<E>> {
    let out = ddim_sample_batch(net, &z_l.clone().unsqueeze0(), &[cfg.seed], cfg.steps, &cfg.sched)?;
    Ok(out.index0(0))
}

/// Bicubic-upsample each LR image by `scale`, encode, sample with `steps`
/// DDIM steps (image `i` seeded by `seeds[i]`), decode.
pub fn super_resolve_with<P: VPredictor + ?Sized>(
    net: &P,
    ae: &Autoencoder,
    x_l: &[Image],
    scale: ScaleFactor,
    seeds: &[u64],
    steps: usize,
) -> Result<Vec<Image>> {
    if x_l.len() != seeds.len() {
        return Err(Error::InvalidArgument(format!("{} images with {} seeds", x_l.len(), seeds.len())));
    }
    if x_l.is_empty() {
        return Ok(Vec::new());
    }
    let s = scale.usize();
    let ups = x_l
        .iter()
        .map(|x| bicubic_resize(x, x.height * s, x.width * s))
        .collect::<Result<Vec<_>>>()?;
    let cond = ae.encode_batch(&ups.iter().collect::<Vec<_>>())?;
    let z = ddim_sample_batch(net, &cond, seeds, steps, &NoiseSchedule::default())?;
    ae.decode_batch(&z)
}

/// Bicubic-upsample → encode → DDIM → decode.
#[derive(Debug, Clone)]
pub struct SRPipeline {
    pub ae: Autoencoder,
    pub net: DenoiserNet,
    pub scale: ScaleFactor,
}

impl SRPipeline {
    pub fn new(ae: Autoencoder, net: DenoiserNet, scale: ScaleFactor) -> Result<Self> {
        if !ae.is_frozen() || !net.frozen {
            return Err(Error::Frozen("pipeline components must be frozen".into()));
        }
        if net.config.out_channels != ae.latent_channels() {
            return Err(Error::InvalidConfig(format!(
                "denoiser has {} latent channels, autoencoder {}",
                net.config.out_channels,
                ae.latent_channels()
            )));
        }
        Ok(Self { ae, net, scale })
    }

    /// HR size for `x_l`, if the autoencoder and U-Net can both halve it enough.
    fn output_size(&self, x_l: &Image) -> Result<(usize, usize)> {
        let s = self.scale.usize();
        let (h, w) = (x_l.height * s, x_l.width * s);
        let m = self.ae.factor() * self.net.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::InvalidArgument(format!(
                "{h}x{w} output not divisible by {m} (autoencoder factor x U-Net depth)"
            )));
        }
        Ok((h, w))
    }

    /// Super-resolves a batch; image `i` uses noise seed `seeds[i]`.
    pub fn super_resolve_batch(&self, x_l: &[Image], seeds: &[u64], steps: usize) -> Result<Vec<Image>> {
        for x in x_l {
            self.output_size(x)?;
        }
        super_resolve_with(&self.net, &self.ae, x_l, self.scale, seeds, steps)
    }

    pub fn super_resolve(&self, x_l: &Image, cfg: &SamplerConfig) -> Result<Image> {
        let (h, w) = self.output_size(x_l)?;
        let ups = bicubic_resize(x_l, h, w)?;
        let cond = self.ae.encode(&ups)?;
        let z = ddim_sample(&self.net, &cond, cfg)?;
        self.ae.decode(&z)
    }
}
