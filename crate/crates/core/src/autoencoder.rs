//! Deterministic convolutional autoencoder standing in for a frozen latent
//! VAE, its training loop, and decoder fine-tuning on one-step samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::degradation::{degrade, resize_like, DegradeMode, Image, ScaleFactor};
use crate::error::{Error, Result};
use crate::nn::{loss_and_grads, Bound, Init, Layers, ParamSet};
use crate::optim::{adam_step, AdamState};
use crate::sampler::{ddim_sample_batch, SamplerConfig, VPredictor};
use crate::tensor::Tensor;
use crate::unet::DenoiserNet;

/// Weight of the image-gradient term in the reconstruction loss.
pub const GRADIENT_LOSS_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AEMode {
    /// Latent = pixels; no parameters.
    Identity,
    #[default]
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub mode: AEMode,
    pub latent_channels: usize,
    /// Spatial downsampling factor (power of two).
    pub f: usize,
    pub image_channels: usize,
    pub base_channels: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            mode: AEMode::Learned,
            latent_channels: 2,
            f: 2,
            image_channels: 1,
            base_channels: 32,
        }
    }
}

impl AutoencoderConfig {
    pub fn identity(image_channels: usize) -> Self {
        Self {
            mode: AEMode::Identity,
            latent_channels: image_channels,
            f: 1,
            image_channels,
            base_channels: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        match self.mode {
            AEMode::Identity => {
                if self.f != 1 || self.latent_channels != self.image_channels {
                    return bad("identity autoencoder needs f = 1 and latent_channels = image channels".into());
                }
            }
            AEMode::Learned => {
                if self.f < 2 || !self.f.is_power_of_two() {
                    return bad(format!("autoencoder factor {} must be a power of two >= 2", self.f));
                }
                if self.latent_channels == 0 || self.base_channels < 4 {
                    return bad("latent_channels >= 1 and base_channels >= 4 required".into());
                }
            }
        }
        if self.image_channels == 0 {
            return bad("image_channels must be >= 1".into());
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.f.trailing_zeros() as usize
    }

    /// Width at resolution level `j` (0 = full resolution). The full-res
    /// level runs at half width; it dominates the cost.
    fn level_width(&self, j: usize) -> usize {
        if j == 0 {
            (self.base_channels / 2).max(4)
        } else {
            self.base_channels
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    /// Per-channel latent standardization: the encoder emits
    /// `(raw - latent_mean[c]) * latent_scale[c]`. Empty means raw latents.
    pub latent_mean: Vec<f32>,
    pub latent_scale: Vec<f32>,
    pub encoder_frozen: bool,
    pub decoder_frozen: bool,
}

fn encoder_on_tape(cfg: &AutoencoderConfig, tape: &mut Tape<f32>, bound: &Bound, x: Var) -> Result<Var> {
    let l = Layers { bound };
    let mut h = l.conv(tape, "enc.in", x, 1)?;
    h = tape.silu(h);
    for i in 0..cfg.levels() {
        h = l.conv(tape, &format!("enc.{i}.down"), h, 2)?;
        h = tape.silu(h);
        let r = l.conv(tape, &format!("enc.{i}.conv"), h, 1)?;
        let r = tape.silu(r);
        h = tape.add(h, r)?;
    }
    l.conv(tape, "enc.out", h, 1)
}

fn decoder_on_tape(cfg: &AutoencoderConfig, tape: &mut Tape<f32>, bound: &Bound, z: Var) -> Result<Var> {
    let l = Layers { bound };
    let mut h = l.conv(tape, "dec.in", z, 1)?;
    h = tape.silu(h);
    for i in 0..cfg.levels() {
        h = tape.upsample2(h)?;
        h = l.conv(tape, &format!("dec.{i}.up"), h, 1)?;
        h = tape.silu(h);
        let r = l.conv(tape, &format!("dec.{i}.conv"), h, 1)?;
        let r = tape.silu(r);
        h = tape.add(h, r)?;
    }
    let out = l.conv(tape, "dec.out", h, 1)?;
    Ok(tape.sigmoid(out))
}

/// Applies `v -> (v + shift[c]) * mul[c]` over the channel axis of a
/// `[N, C, H, W]` batch.
fn affine_channels(t: &Tensor, shift: &[f32], mul: &[f32]) -> Tensor {
    let mut out = t.clone();
    if shift.is_empty() {
        return out;
    }
    let (c, hw) = (t.shape()[1], t.shape()[2] * t.shape()[3]);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (i / hw) % c;
        *v = (*v + shift[ch]) * mul[ch];
    }
    out
}

impl Autoencoder {
    fn normalize(&self, raw: &Tensor) -> Tensor {
        let shift: Vec<f32> = self.latent_mean.iter().map(|m| -m).collect();
        affine_channels(raw, &shift, &self.latent_scale)
    }

    fn denormalize(&self, z: &Tensor) -> Tensor {
        let inv: Vec<f32> = self.latent_scale.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f32> = self.latent_mean.iter().zip(&self.latent_scale).map(|(m, s)| m * s).collect();
        affine_channels(z, &shift, &inv)
    }
}

/// Reconstruction objective: MSE + weighted MSE of horizontal and vertical
/// image differences.
pub fn reconstruction_loss(tape: &mut Tape<f32>, recon: Var, target: Var) -> Result<Var> {
    let l2 = tape.mse(recon, target)?;
    let rx = tape.diff_x(recon)?;
    let tx = tape.diff_x(target)?;
    let ry = tape.diff_y(recon)?;
    let ty = tape.diff_y(target)?;
    let gx = tape.mse(rx, tx)?;
    let gy = tape.mse(ry, ty)?;
    let g = tape.add(gx, gy)?;
    let g = tape.scale(g, GRADIENT_LOSS_WEIGHT as f32);
    tape.add(l2, g)
}

fn stack_images(images: &[&Image]) -> Result<Tensor> {
    let ts: Vec<Tensor> = images.iter().map(|i| i.to_tensor()).collect();
    Tensor::stack(&ts)
}

impl Autoencoder {
    pub fn identity(image_channels: usize) -> Self {
        Self {
            config: AutoencoderConfig::identity(image_channels),
            encoder: ParamSet::new(),
            decoder: ParamSet::new(),
            latent_mean: Vec::new(),
            latent_scale: Vec::new(),
            encoder_frozen: true,
            decoder_frozen: true,
        }
    }

    /// Untrained learned autoencoder.
    pub fn init(config: &AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.mode == AEMode::Identity {
            return Ok(Self::identity(config.image_channels));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (levels, w) = (config.levels(), |j| config.level_width(j));
        let mut enc = Init::new(&mut rng);
        enc.conv("enc.in", config.image_channels, w(0), 3, false)?;
        for i in 0..levels {
            enc.conv(&format!("enc.{i}.down"), w(i), w(i + 1), 3, false)?;
            enc.conv(&format!("enc.{i}.conv"), w(i + 1), w(i + 1), 3, false)?;
        }
        enc.conv("enc.out", w(levels), config.latent_channels, 3, false)?;
        let encoder = enc.params;
        let mut dec = Init::new(&mut rng);
        dec.conv("dec.in", config.latent_channels, w(levels), 3, false)?;
        for i in 0..levels {
            let j = levels - 1 - i;
            dec.conv(&format!("dec.{i}.up"), w(j + 1), w(j), 3, false)?;
            dec.conv(&format!("dec.{i}.conv"), w(j), w(j), 3, false)?;
        }
        dec.conv("dec.out", w(0), config.image_channels, 3, false)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder: dec.params,
            latent_mean: Vec::new(),
            latent_scale: Vec::new(),
            encoder_frozen: false,
            decoder_frozen: false,
        })
    }

    pub fn factor(&self) -> usize {
        self.config.f
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    pub fn is_frozen(&self) -> bool {
        self.encoder_frozen && self.decoder_frozen
    }

    pub fn freeze(&mut self) {
        self.encoder_frozen = true;
        self.decoder_frozen = true;
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let f = self.config.f;
        if img.channels != self.config.image_channels || img.height % f != 0 || img.width % f != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {:?} incompatible with autoencoder (channels {}, factor {f})",
                img.dims(),
                self.config.image_channels
            )));
        }
        Ok(())
    }

    /// `[N, C, H, W]` pixels → `[N, latent, H/f, W/f]`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        if self.config.mode == AEMode::Identity {
            return Ok(x.clone());
        }
        let mut tape = Tape::new();
        let bound = self.encoder.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = encoder_on_tape(&self.config, &mut tape, &bound, xv)?;
        Ok(self.normalize(tape.value(z)))
    }

    /// Latent batch → pixel batch in `[0, 1]`.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let shape = z.shape();
        if shape.len() != 4 || shape[1] != self.config.latent_channels {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: shape.to_vec(),
                rhs: vec![0, self.config.latent_channels, 0, 0],
            });
        }
        if self.config.mode == AEMode::Identity {
            return Ok(z.map(|v| v.clamp(0.0, 1.0)));
        }
        let mut tape = Tape::new();
        let bound = self.decoder.bind(&mut tape, false);
        let zv = tape.constant(self.denormalize(z));
        let x = decoder_on_tape(&self.config, &mut tape, &bound, zv)?;
        Ok(tape.value(x).clone())
    }

    pub fn encode(&self, x: &Image) -> Result<Tensor> {
        self.check_image(x)?;
        Ok(self.encode_tensor(&x.to_tensor::<f32>().unsqueeze0())?.index0(0))
    }

    pub fn encode_batch(&self, images: &[&Image]) -> Result<Tensor> {
        for img in images {
            self.check_image(img)?;
        }
        self.encode_tensor(&stack_images(images)?)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Image> {
        if z.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: z.shape().to_vec(),
                rhs: vec![self.config.latent_channels, 0, 0],
            });
        }
        Image::from_tensor(&self.decode_tensor(&z.clone().unsqueeze0())?.index0(0))
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Vec<Image>> {
        self.decode_tensor(z)?
            .unstack()
            .iter()
            .map(Image::from_tensor)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Train on random square crops of this size (0 = whole images). The
    /// net is fully convolutional, so crops cut cost without changing it.
    pub crop: usize,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            crop: 32,
        }
    }
}

/// Per-step losses of a training run.
#[derive(Debug, Clone, Default)]
pub struct LossLog {
    pub losses: Vec<f64>,
}

fn crop(img: &Image, size: usize, f: usize, rng: &mut ChaCha8Rng) -> Image {
    if size == 0 || (size >= img.height && size >= img.width) {
        return img.clone();
    }
    let (ch, cw) = (size.min(img.height), size.min(img.width));
    let y0 = rng.gen_range(0..=(img.height - ch) / f) * f;
    let x0 = rng.gen_range(0..=(img.width - cw) / f) * f;
    let mut px = Vec::with_capacity(img.channels * ch * cw);
    for c in 0..img.channels {
        let plane = img.plane(c);
        for y in y0..y0 + ch {
            px.extend_from_slice(&plane[y * img.width + x0..y * img.width + x0 + cw]);
        }
    }
    Image::new(img.channels, ch, cw, px).expect("crop dims are consistent")
}

fn sample_batch(data: &[Image], train: &AeTrainConfig, f: usize, rng: &mut ChaCha8Rng) -> Vec<Image> {
    (0..train.batch)
        .map(|_| {
            let img = &data[rng.gen_range(0..data.len())];
            crop(img, train.crop, f, rng)
        })
        .collect()
}

/// Trains encoder and decoder jointly, sets the latent scale, and freezes.
pub fn train_autoencoder(
    dataset: &[Image],
    config: &AutoencoderConfig,
    train: &AeTrainConfig,
) -> Result<(Autoencoder, LossLog)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("autoencoder dataset is empty".into()));
    }
    if train.crop % config.f.max(1) != 0 {
        return Err(Error::InvalidArgument(format!(
            "crop {} is not a multiple of the autoencoder factor {}",
            train.crop, config.f
        )));
    }
    let mut ae = Autoencoder::init(config, train.seed)?;
    if config.mode == AEMode::Identity {
        return Ok((ae, LossLog::default()));
    }
    let mut joint = ParamSet::from_map(
        ae.encoder
            .clone()
            .into_map()
            .into_iter()
            .chain(ae.decoder.clone().into_map())
            .collect(),
    );
    let mut opt = AdamState::new(train.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xae);
    let mut log = LossLog::default();
    for step in 0..train.steps {
        let imgs = sample_batch(dataset, train, config.f, &mut rng);
        let batch = stack_images(&imgs.iter().collect::<Vec<_>>())?;
        let (loss, grads) = loss_and_grads(&joint, |tape, bound| {
            let x = tape.constant(batch.clone());
            let z = encoder_on_tape(config, tape, bound, x)?;
            let r = decoder_on_tape(config, tape, bound, z)?;
            reconstruction_loss(tape, r, x)
        })
        .map_err(|e| e.context(format!("autoencoder step {step}")))?;
        adam_step(&mut joint, &grads, &mut opt)?;
        log.losses.push(loss as f64);
    }
    let (enc, dec): (Vec<_>, Vec<_>) = joint.into_map().into_iter().partition(|(k, _)| k.starts_with("enc."));
    ae.encoder = ParamSet::from_map(enc.into_iter().collect());
    ae.decoder = ParamSet::from_map(dec.into_iter().collect());

    // Standardize each latent channel over (a subset of) the data. Raw
    // latents sit far from zero with a small spread, which the one-step
    // sampler turns into a brightness bias.
    let c = config.latent_channels;
    let probe: Vec<&Image> = dataset.iter().take(256).collect();
    let (mut sum, mut sq, mut n) = (vec![0.0f64; c], vec![0.0f64; c], 0usize);
    for chunk in probe.chunks(32) {
        let z = ae.encode_batch(chunk)?;
        let hw = z.shape()[2] * z.shape()[3];
        for (i, &v) in z.data().iter().enumerate() {
            let ch = (i / hw) % c;
            sum[ch] += v as f64;
            sq[ch] += (v as f64) * (v as f64);
        }
        n += z.shape()[0] * hw;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    ae.latent_scale =
        sq.iter().zip(&mean).map(|(q, m)| (1.0 / (q / n as f64 - m * m).max(1e-12).sqrt()) as f32).collect();
    ae.latent_mean = mean.iter().map(|&m| m as f32).collect();
    ae.freeze();
    Ok((ae, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 16,
            lr: 2e-4,
            seed: 0,
        }
    }
}

/// What the decoder is fine-tuned for: which degradation produces the LR input.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneTask {
    pub scale: ScaleFactor,
    pub degrade_mode: DegradeMode,
}

/// Retrains only the decoder on one-step DDIM latents from the frozen `unet`.
/// The returned autoencoder shares the encoder bytes of `ae`.
pub fn finetune_decoder(
    ae: &Autoencoder,
    unet: &DenoiserNet,
    sampler: &SamplerConfig,
    dataset: &[Image],
    task: &FinetuneTask,
    cfg: &FinetuneConfig,
) -> Result<(Autoencoder, LossLog)> {
    if sampler.steps != 1 {
        return Err(Error::InvalidArgument(format!(
            "decoder fine-tuning runs on one-step samples; got {} steps",
            sampler.steps
        )));
    }
    if !unet.is_frozen() {
        return Err(Error::Frozen("decoder fine-tuning needs a frozen U-Net".into()));
    }
    if ae.config.mode == AEMode::Identity {
        return Err(Error::InvalidArgument("identity autoencoder has no decoder to fine-tune".into()));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning dataset is empty".into()));
    }
    let mut out = ae.clone();
    let mut decoder = ae.decoder.clone();
    let mut opt = AdamState::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdec);
    let mut log = LossLog::default();
    for step in 0..cfg.steps {
        let hr: Vec<&Image> = (0..cfg.batch).map(|_| &dataset[rng.gen_range(0..dataset.len())]).collect();
        let mut cond_imgs = Vec::with_capacity(hr.len());
        let mut seeds = Vec::with_capacity(hr.len());
        for x in &hr {
            let s: u64 = rng.gen();
            let lr = degrade(x, task.scale, &task.degrade_mode, s)?;
            cond_imgs.push(resize_like(&lr, x)?);
            seeds.push(rng.gen());
        }
        let cond = ae.encode_batch(&cond_imgs.iter().collect::<Vec<_>>())?;
        let z0 = ddim_sample_batch(unet, &cond, &seeds, 1, &sampler.sched)?;
        let target = stack_images(&hr)?;
        let (loss, grads) = loss_and_grads(&decoder, |tape, bound| {
            let z = tape.constant(ae.denormalize(&z0));
            let r = decoder_on_tape(&ae.config, tape, bound, z)?;
            let t = tape.constant(target.clone());
            reconstruction_loss(tape, r, t)
        })
        .map_err(|e| e.context(format!("decoder fine-tuning step {step}")))?;
        adam_step(&mut decoder, &grads, &mut opt)?;
        log.losses.push(loss as f64);
    }
    out.decoder = decoder;
    out.freeze();
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::gen_texture;

    fn small_cfg() -> AutoencoderConfig {
        AutoencoderConfig {
            base_channels: 8,
            ..Default::default()
        }
    }

    #[test]
    fn identity_mode_passes_pixels() {
        let ae = Autoencoder::identity(1);
        let x = gen_texture(1, 16, 16);
        let z = ae.encode(&x).unwrap();
        assert_eq!(z, x.to_tensor());
        let wild = Tensor::from_fn([1, 4, 4], |i| i as f32 * 0.2 - 1.0);
        let d = ae.decode(&wild).unwrap();
        for (a, b) in d.pixels.iter().zip(wild.data()) {
            assert_eq!(*a, b.clamp(0.0, 1.0));
        }
    }

    #[test]
    fn learned_shapes_and_bounds() {
        let ae = Autoencoder::init(&small_cfg(), 3).unwrap();
        let x = gen_texture(5, 32, 32);
        let z = ae.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 16, 16]);
        assert_eq!(ae.encode(&x).unwrap(), z);
        let wild = Tensor::from_fn([2, 16, 16], |i| ((i * 37 % 101) as f32 - 50.0) * 3.0);
        let img = ae.decode(&wild).unwrap();
        assert_eq!(img.dims(), [1, 32, 32]);
        assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(ae.encode(&gen_texture(5, 31, 32)).is_err());
        assert!(ae.decode(&Tensor::zeros([3, 16, 16])).is_err());
    }

    #[test]
    fn training_reduces_loss_and_freezes() {
        let data: Vec<Image> = (0..32).map(|s| gen_texture(s, 16, 16)).collect();
        let train = AeTrainConfig {
            steps: 60,
            batch: 4,
            lr: 2e-3,
            seed: 1,
            crop: 8,
        };
        let (ae, log) = train_autoencoder(&data, &small_cfg(), &train).unwrap();
        assert!(ae.is_frozen());
        let head: f64 = log.losses[..5].iter().sum();
        let tail: f64 = log.losses[55..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
        assert!(train_autoencoder(&[], &small_cfg(), &train).is_err());
    }

    #[test]
    fn latents_are_standardized_per_channel() {
        let data: Vec<Image> = (0..32).map(|s| gen_texture(s, 16, 16)).collect();
        let train = AeTrainConfig { steps: 20, batch: 4, lr: 2e-3, seed: 2, crop: 8 };
        let (ae, _) = train_autoencoder(&data, &small_cfg(), &train).unwrap();
        let c = ae.latent_channels();
        assert_eq!((ae.latent_mean.len(), ae.latent_scale.len()), (c, c));
        let z = ae.encode_batch(&data.iter().collect::<Vec<_>>()).unwrap();
        let hw = z.shape()[2] * z.shape()[3];
        for ch in 0..c {
            let v: Vec<f64> =
                z.data().iter().enumerate().filter(|(i, _)| (i / hw) % c == ch).map(|(_, &v)| v as f64).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
            assert!(m.abs() < 1e-3 && (var - 1.0).abs() < 1e-3, "channel {ch}: mean {m} var {var}");
        }
        let back = ae.normalize(&ae.denormalize(&z));
        assert!(back.data().iter().zip(z.data()).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        c.f = 3;
        assert!(Autoencoder::init(&c, 0).is_err());
        let mut c = AutoencoderConfig::identity(1);
        c.f = 2;
        assert!(c.validate().is_err());
    }
}
