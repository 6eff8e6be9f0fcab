//! Conditional U-Net that predicts `v` from a noisy latent, a conditioning
//! latent (concatenated on the channel axis) and the diffusion time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{loss_and_grads, Bound, GradMap, Init, Layers, ParamSet};
use crate::tensor::{Element, Tensor};

/// Phase scale applied to `t ∈ [0, 1]` before the sinusoidal embedding, so the
/// lowest frequency spans the usual 1000-step range.
const TIME_PHASE_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    /// Channel multiplier per resolution level; length must equal `depth`.
    pub channel_mult: Vec<usize>,
    pub depth: usize,
    pub width_scale: f64,
    pub time_embed_dim: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Strided-conv downsampling and conv after nearest upsampling; average
    /// pooling and bare upsampling otherwise.
    pub resample_with_conv: bool,
    pub mid_block: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mult: vec![1, 2],
            depth: 2,
            width_scale: 1.0,
            time_embed_dim: 32,
            in_channels: 4,
            out_channels: 2,
            resample_with_conv: true,
            mid_block: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth < 1 {
            return bad("depth must be >= 1".into());
        }
        if self.channel_mult.len() != self.depth {
            return bad(format!(
                "channel_mult has {} entries but depth is {}",
                self.channel_mult.len(),
                self.depth
            ));
        }
        if self.channel_mult.contains(&0) {
            return bad("channel_mult entries must be >= 1".into());
        }
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return bad(format!("width_scale {} outside (0, 1]", self.width_scale));
        }
        if self.width_scale * (self.base_channels as f64) < 4.0 {
            return bad(format!(
                "width_scale * base_channels = {} < 4",
                self.width_scale * self.base_channels as f64
            ));
        }
        if self.out_channels == 0 || self.in_channels != 2 * self.out_channels {
            return bad(format!(
                "in_channels ({}) must be 2 x out_channels ({})",
                self.in_channels, self.out_channels
            ));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad(format!("time_embed_dim {} must be even and >= 2", self.time_embed_dim));
        }
        Ok(())
    }

    /// Channel count of the first level after width scaling.
    pub fn width(&self) -> usize {
        (self.base_channels as f64 * self.width_scale).round() as usize
    }

    pub fn level_channels(&self) -> Vec<usize> {
        let w = self.width();
        self.channel_mult.iter().map(|m| m * w).collect()
    }

    /// Spatial dims must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn with_width_scale(&self, width_scale: f64) -> Self {
        Self {
            width_scale,
            ..self.clone()
        }
    }
}

/// Sinusoidal embedding `[sin(ω₀τ) … sin(ω_{h−1}τ), cos(ω₀τ) … cos(ω_{h−1}τ)]`
/// with `τ = 1000·t` and geometric frequencies `ωᵢ = 10000^(−i/h)`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("time embedding dim {dim} must be even")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    let half = dim / 2;
    let phase = t * TIME_PHASE_SCALE;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (phase * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (phase * f).cos()));
    Ok(out)
}

/// The denoiser `v̂ = net(z_t, z_cond, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet<E: Element = f32> {
    pub config: NetworkConfig,
    pub params: ParamSet<E>,
    pub frozen: bool,
}

fn resblock_init<E: Element>(init: &mut Init<'_, E>, name: &str, cin: usize, cout: usize, temb: usize) -> Result<()> {
    init.norm(&format!("{name}.norm1"), cin)?;
    init.conv(&format!("{name}.conv1"), cin, cout, 3, false)?;
    init.linear(&format!("{name}.temb"), temb, cout)?;
    init.norm(&format!("{name}.norm2"), cout)?;
    init.conv(&format!("{name}.conv2"), cout, cout, 3, false)?;
    if cin != cout {
        init.conv(&format!("{name}.skip"), cin, cout, 1, false)?;
    }
    Ok(())
}

fn resblock<E: Element>(layers: &Layers<'_>, tape: &mut Tape<E>, name: &str, x: Var, temb: Var) -> Result<Var> {
    let h = layers.norm_silu(tape, &format!("{name}.norm1"), x)?;
    let h = layers.conv(tape, &format!("{name}.conv1"), h, 1)?;
    let bias = layers.linear(tape, &format!("{name}.temb"), temb)?;
    let h = tape.add_channel_bias(h, bias)?;
    let h = layers.norm_silu(tape, &format!("{name}.norm2"), h)?;
    let h = layers.conv(tape, &format!("{name}.conv2"), h, 1)?;
    let skip = if layers.bound.var(&format!("{name}.skip.w")).is_ok() {
        layers.conv(tape, &format!("{name}.skip"), x, 1)?
    } else {
        x
    };
    tape.add(skip, h)
}

impl<E: Element> DenoiserNet<E> {
    /// Deterministic Kaiming-uniform initialization; the output conv starts at zero.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let chans = config.level_channels();
        let temb = config.time_embed_dim;

        init.linear("time.0", temb, temb)?;
        init.linear("time.1", temb, temb)?;
        init.conv("in", config.in_channels, chans[0], 3, false)?;
        let mut prev = chans[0];
        for (l, &c) in chans.iter().enumerate() {
            resblock_init(&mut init, &format!("down.{l}.res"), prev, c, temb)?;
            if config.resample_with_conv {
                init.conv(&format!("down.{l}.down"), c, c, 3, false)?;
            }
            prev = c;
        }
        if config.mid_block {
            resblock_init(&mut init, "mid.res", prev, prev, temb)?;
        }
        for (l, &c) in chans.iter().enumerate().rev() {
            if config.resample_with_conv {
                init.conv(&format!("up.{l}.up"), prev, prev, 3, false)?;
            }
            resblock_init(&mut init, &format!("up.{l}.res"), prev + c, c, temb)?;
            prev = c;
        }
        init.norm("out.norm", prev)?;
        init.conv("out.conv", prev, config.out_channels, 3, true)?;

        Ok(Self {
            config: config.clone(),
            params: init.params,
            frozen: false,
        })
    }

    pub fn from_params(config: NetworkConfig, params: ParamSet<E>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let reference = Self::build(&config, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "DenoiserNet::from_params",
                    lhs: t.shape().to_vec(),
                    rhs: got.shape().to_vec(),
                });
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        Ok(Self {
            config,
            params,
            frozen,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen_copy(&self) -> Self {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    /// A trainable copy carrying the same weights.
    pub fn unfrozen_copy(&self) -> Self {
        Self {
            frozen: false,
            ..self.clone()
        }
    }

    fn check_inputs(&self, z_t: &[usize], z_cond: &[usize], n_times: usize) -> Result<()> {
        if z_t != z_cond {
            return Err(Error::ShapeMismatch {
                op: "denoiser inputs",
                lhs: z_t.to_vec(),
                rhs: z_cond.to_vec(),
            });
        }
        let m = self.config.spatial_multiple();
        match *z_t {
            [n, c, h, w] if c == self.config.out_channels && h % m == 0 && w % m == 0 && n == n_times => Ok(()),
            _ => Err(Error::ShapeMismatch {
                op: "denoiser input (expects [N, out_channels, H, W], H and W divisible by 2^depth, one t per sample)",
                lhs: z_t.to_vec(),
                rhs: vec![n_times, self.config.out_channels, m, m],
            }),
        }
    }

    /// Records the forward pass on `tape`. `z_t`, `z_cond`: `[N, C, H, W]`;
    /// `t` has one entry per sample.
    pub fn forward_on_tape(&self, tape: &mut Tape<E>, bound: &Bound, z_t: Var, z_cond: Var, t: &[f64]) -> Result<Var> {
        self.check_inputs(tape.shape(z_t), tape.shape(z_cond), t.len())?;
        let layers = Layers { bound };
        let temb_dim = self.config.time_embed_dim;
        let mut emb = Vec::with_capacity(t.len() * temb_dim);
        for &ti in t {
            emb.extend(time_embedding(ti, temb_dim)?.into_iter().map(E::from_f64_lossy));
        }
        let emb = tape.constant(Tensor::new([t.len(), temb_dim], emb)?);
        let temb = layers.linear(tape, "time.0", emb)?;
        let temb = tape.silu(temb);
        let temb = layers.linear(tape, "time.1", temb)?;
        let temb = tape.silu(temb);

        let x = tape.concat_channels(z_t, z_cond)?;
        let mut h = layers.conv(tape, "in", x, 1)?;
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        for l in 0..depth {
            h = resblock(&layers, tape, &format!("down.{l}.res"), h, temb)?;
            skips.push(h);
            h = if self.config.resample_with_conv {
                layers.conv(tape, &format!("down.{l}.down"), h, 2)?
            } else {
                tape.avg_pool2(h)?
            };
        }
        if self.config.mid_block {
            h = resblock(&layers, tape, "mid.res", h, temb)?;
        }
        for l in (0..depth).rev() {
            h = tape.upsample2(h)?;
            if self.config.resample_with_conv {
                h = layers.conv(tape, &format!("up.{l}.up"), h, 1)?;
            }
            h = tape.concat_channels(h, skips[l])?;
            h = resblock(&layers, tape, &format!("up.{l}.res"), h, temb)?;
        }
        let h = layers.norm_silu(tape, "out.norm", h)?;
        layers.conv(tape, "out.conv", h, 1)
    }

    /// Batched inference without gradient tracking.
    pub fn forward_batch(&self, z_t: &Tensor<E>, z_cond: &Tensor<E>, t: &[f64]) -> Result<Tensor<E>> {
        z_t.ensure_finite("denoiser input z_t")?;
        z_cond.ensure_finite("denoiser input z_cond")?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let a = tape.constant(z_t.clone());
        let b = tape.constant(z_cond.clone());
        let out = self.forward_on_tape(&mut tape, &bound, a, b, t)?;
        let out = tape.value(out).clone();
        out.ensure_finite("denoiser output")?;
        Ok(out)
    }

    /// Single-sample forward: `[C, H, W]` inputs, one `t`.
    pub fn forward_denoiser(&self, z_t: &Tensor<E>, z_cond: &Tensor<E>, t: f64) -> Result<Tensor<E>> {
        let out = self.forward_batch(&z_t.clone().unsqueeze0(), &z_cond.clone().unsqueeze0(), &[t])?;
        Ok(out.index0(0))
    }

    /// Loss and gradients for this (trainable) net. Nets used inside
    /// `loss_fn` other than the bound one contribute constants only.
    pub fn loss_and_grads<F>(&self, loss_fn: F) -> Result<(E, GradMap<E>)>
    where
        F: FnOnce(&mut Tape<E>, &Bound) -> Result<Var>,
    {
        if self.frozen {
            return Err(Error::Frozen("gradients requested for a frozen denoiser".into()));
        }
        loss_and_grads(&self.params, loss_fn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            base_channels: 4,
            channel_mult: vec![1],
            depth: 1,
            width_scale: 1.0,
            time_embed_dim: 2,
            in_channels: 2,
            out_channels: 1,
            resample_with_conv: false,
            mid_block: false,
        }
    }

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            base_channels: 8,
            channel_mult: vec![1, 2],
            depth: 2,
            width_scale: 1.0,
            time_embed_dim: 8,
            in_channels: 4,
            out_channels: 2,
            resample_with_conv: true,
            mid_block: true,
        }
    }

    #[test]
    fn embedding_zero_phase_and_range() {
        assert_eq!(time_embedding(0.0, 4).unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
        let a = time_embedding(0.3, 8).unwrap();
        let b = time_embedding(0.7, 8).unwrap();
        assert_ne!(a, b);
        for t in [0.0, 0.13, 0.5, 0.99, 1.0] {
            assert!(time_embedding(t, 16).unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(time_embedding(0.5, 3).is_err());
        assert!(time_embedding(1.5, 4).is_err());
    }

    #[test]
    fn forward_shape_contract() {
        let net = DenoiserNet::<f32>::build(&small_config(), 7).unwrap();
        let z = Tensor::from_fn([2, 16, 16], |i| (i as f32 * 0.1).sin());
        let c = Tensor::from_fn([2, 16, 16], |i| (i as f32 * 0.2).cos());
        let out = net.forward_denoiser(&z, &c, 0.4).unwrap();
        assert_eq!(out.shape(), &[2, 16, 16]);
    }

    #[test]
    fn same_seed_same_params() {
        let a = DenoiserNet::<f32>::build(&small_config(), 7).unwrap();
        let b = DenoiserNet::<f32>::build(&small_config(), 7).unwrap();
        let c = DenoiserNet::<f32>::build(&small_config(), 8).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn output_conv_starts_at_zero() {
        let net = DenoiserNet::<f32>::build(&small_config(), 1).unwrap();
        let z = Tensor::full([2, 8, 8], 0.3);
        let out = net.forward_denoiser(&z, &z, 0.5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_pure_and_finite_on_zero_input() {
        let mut net = DenoiserNet::<f32>::build(&small_config(), 3).unwrap();
        // Give the output conv weights so the output depends on everything.
        for (name, t) in net.params.iter_mut() {
            if name.starts_with("out.conv") {
                let n = t.len();
                *t = Tensor::from_fn(t.shape().to_vec(), |i| ((i * 31 % n) as f32 / n as f32) - 0.5);
            }
        }
        let z = Tensor::zeros([2, 8, 8]);
        for t in [0.0, 0.5, 1.0] {
            let a = net.forward_denoiser(&z, &z, t).unwrap();
            let b = net.forward_denoiser(&z, &z, t).unwrap();
            assert!(a.all_finite());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_bad_inputs_and_configs() {
        let net = DenoiserNet::<f32>::build(&small_config(), 3).unwrap();
        let z = Tensor::zeros([2, 8, 8]);
        assert!(net.forward_denoiser(&z, &Tensor::zeros([2, 8, 4]), 0.5).is_err());
        assert!(net.forward_denoiser(&Tensor::zeros([2, 6, 6]), &Tensor::zeros([2, 6, 6]), 0.5).is_err());
        let mut nan = z.clone();
        nan.data_mut()[0] = f32::NAN;
        assert!(matches!(net.forward_denoiser(&nan, &z, 0.5), Err(Error::NonFinite(_))));

        let mut cfg = small_config();
        cfg.in_channels = 3;
        assert!(matches!(DenoiserNet::<f32>::build(&cfg, 0), Err(Error::InvalidConfig(_))));
        let mut cfg = small_config();
        cfg.depth = 0;
        cfg.channel_mult.clear();
        assert!(DenoiserNet::<f32>::build(&cfg, 0).is_err());
        let mut cfg = small_config();
        cfg.width_scale = 0.25;
        assert!(DenoiserNet::<f32>::build(&cfg, 0).unwrap_err().to_string().contains("< 4"));
    }

    #[test]
    fn tiny_config_is_under_one_thousand_params() {
        let net = DenoiserNet::<f64>::build(&tiny_config(), 0).unwrap();
        assert!(net.param_count() <= 1000, "{}", net.param_count());
    }

    #[test]
    fn frozen_net_refuses_gradients() {
        let net = DenoiserNet::<f32>::build(&tiny_config(), 0).unwrap().frozen_copy();
        let r = net.loss_and_grads(|tape, b| Ok(tape.sum_square(b.var("in.w")?)));
        assert!(matches!(r, Err(Error::Frozen(_))));
    }
}
