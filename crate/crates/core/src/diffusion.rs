//! Variance-preserving cosine schedule, forward noising, v-parameterization
//! and the two training objectives.
//!
//! With `α² + σ² = 1` the weight `ω(λ) = 1 + α²/σ²` equals `1/σ²`, so the
//! ω-weighted x-space error `ω‖x̂ − x‖²` is exactly the v-space error
//! `‖v̂ − v‖²`. Both losses are therefore plain MSE on `v`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::tensor::{Element, Tensor};
use crate::unet::DenoiserNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub t_clip: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            t_clip: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub alpha: f64,
    pub sigma: f64,
    /// Log signal-to-noise ratio, evaluated at the clipped time.
    pub lambda: f64,
}

impl ScheduleValues {
    /// `ω(λ) = 1 + α²/σ²`, from the clipped λ.
    pub fn omega(&self) -> f64 {
        1.0 + self.lambda.exp()
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")))
    }
}

impl NoiseSchedule {
    fn alpha_sigma(&self, t: f64) -> (f64, f64) {
        match self.kind {
            ScheduleKind::Cosine => {
                // Exact endpoints: cos(π/2) is not exactly 0 in floating point.
                if t == 1.0 {
                    (0.0, 1.0)
                } else if t == 0.0 {
                    (1.0, 0.0)
                } else {
                    ((FRAC_PI_2 * t).cos(), (FRAC_PI_2 * t).sin())
                }
            }
        }
    }

    pub fn eval(&self, t: f64) -> Result<ScheduleValues> {
        check_time(t)?;
        let (alpha, sigma) = self.alpha_sigma(t);
        let tc = t.clamp(self.t_clip, 1.0 - self.t_clip);
        let (ac, sc) = self.alpha_sigma(tc);
        Ok(ScheduleValues {
            alpha,
            sigma,
            lambda: (ac * ac / (sc * sc)).ln(),
        })
    }

    /// Bounds for training-time sampling of `t`.
    pub fn train_time_range(&self) -> (f64, f64) {
        (self.t_clip, 1.0 - self.t_clip)
    }
}

/// `z_t = α_t z_h + σ_t ε`.
pub fn add_noise<E: Element>(z_h: &Tensor<E>, eps: &Tensor<E>, t: f64, sched: &NoiseSchedule) -> Result<Tensor<E>> {
    let s = sched.eval(t)?;
    z_h.axpby(E::from_f64_lossy(s.alpha), eps, E::from_f64_lossy(s.sigma))
        .map_err(|e| e.context("add_noise"))
}

/// `v = α_t ε − σ_t z_h`.
pub fn v_target<E: Element>(z_h: &Tensor<E>, eps: &Tensor<E>, t: f64, sched: &NoiseSchedule) -> Result<Tensor<E>> {
    let s = sched.eval(t)?;
    eps.axpby(E::from_f64_lossy(s.alpha), z_h, E::from_f64_lossy(-s.sigma))
        .map_err(|e| e.context("v_target"))
}

/// Inverts the v-parameterization: `x̂ = α z_t − σ v̂`, `ε̂ = σ z_t + α v̂`.
pub fn from_v<E: Element>(
    z_t: &Tensor<E>,
    v_hat: &Tensor<E>,
    t: f64,
    sched: &NoiseSchedule,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let s = sched.eval(t)?;
    let (a, sg) = (E::from_f64_lossy(s.alpha), E::from_f64_lossy(s.sigma));
    let x0 = z_t.axpby(a, v_hat, -sg).map_err(|e| e.context("from_v"))?;
    let eps = z_t.axpby(sg, v_hat, a)?;
    Ok((x0, eps))
}

/// Per-sample `(z_t, v)` for a batch with one time per sample.
pub fn noisy_batch<E: Element>(
    z_h: &Tensor<E>,
    eps: &Tensor<E>,
    t: &[f64],
    sched: &NoiseSchedule,
) -> Result<(Tensor<E>, Tensor<E>)> {
    z_h.check_same_shape(eps, "noisy_batch")?;
    let n = z_h.shape()[0];
    if t.len() != n {
        return Err(Error::InvalidArgument(format!("{} times for batch of {n}", t.len())));
    }
    let per = z_h.len() / n.max(1);
    let mut zt = Vec::with_capacity(z_h.len());
    let mut v = Vec::with_capacity(z_h.len());
    for (i, &ti) in t.iter().enumerate() {
        let s = sched.eval(ti)?;
        let (a, sg) = (E::from_f64_lossy(s.alpha), E::from_f64_lossy(s.sigma));
        for j in i * per..(i + 1) * per {
            let (x, e) = (z_h.data()[j], eps.data()[j]);
            zt.push(a * x + sg * e);
            v.push(a * e - sg * x);
        }
    }
    Ok((
        Tensor::new(z_h.shape().to_vec(), zt)?,
        Tensor::new(z_h.shape().to_vec(), v)?,
    ))
}

/// Standard SR objective on a batch: `mean ‖v̂(z_t, z_l, t) − v‖²`.
///
/// Records the student forward on `tape` and returns the scalar loss node.
pub fn sr_loss_on_tape<E: Element>(
    net: &DenoiserNet<E>,
    tape: &mut Tape<E>,
    bound: &Bound,
    z_h: &Tensor<E>,
    z_l: &Tensor<E>,
    t: &[f64],
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Var> {
    z_h.check_same_shape(z_l, "sr_loss")?;
    let (z_t, v) = noisy_batch(z_h, eps, t, sched)?;
    let zt = tape.constant(z_t);
    let zl = tape.constant(z_l.clone());
    let pred = net.forward_on_tape(tape, bound, zt, zl, t)?;
    tape.value(pred).ensure_finite("denoiser output")?;
    let target = tape.constant(v);
    tape.mse(pred, target)
}

/// Scale-distillation objective on a batch: the frozen teacher sees
/// `(z_t, z_l′)`, the student `(z_t, z_l)`, both at the same `t`.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss_on_tape<E: Element>(
    student: &DenoiserNet<E>,
    teacher: &DenoiserNet<E>,
    tape: &mut Tape<E>,
    bound: &Bound,
    z_t: &Tensor<E>,
    z_l: &Tensor<E>,
    z_l_prime: &Tensor<E>,
    t: &[f64],
) -> Result<Var> {
    if !teacher.frozen {
        return Err(Error::Frozen("distillation teacher must be frozen".into()));
    }
    z_t.check_same_shape(z_l, "distill_loss")?;
    z_t.check_same_shape(z_l_prime, "distill_loss")?;
    let target = teacher.forward_batch(z_t, z_l_prime, t)?;
    let zt = tape.constant(z_t.clone());
    let zl = tape.constant(z_l.clone());
    let pred = student.forward_on_tape(tape, bound, zt, zl, t)?;
    tape.value(pred).ensure_finite("denoiser output")?;
    let target = tape.constant(target);
    tape.mse(pred, target)
}

/// Loss value only, for a single `[C, H, W]` example.
pub fn sr_loss<E: Element>(
    net: &DenoiserNet<E>,
    z_h: &Tensor<E>,
    z_l: &Tensor<E>,
    t: f64,
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let (zt, v) = (add_noise(z_h, eps, t, sched)?, v_target(z_h, eps, t, sched)?);
    z_h.check_same_shape(z_l, "sr_loss")?;
    let pred = net.forward_denoiser(&zt, z_l, t)?;
    Ok(mse(&pred, &v))
}

/// Loss value only, for a single `[C, H, W]` example.
pub fn distill_loss<E: Element>(
    student: &DenoiserNet<E>,
    teacher: &DenoiserNet<E>,
    z_t: &Tensor<E>,
    z_l: &Tensor<E>,
    z_l_prime: &Tensor<E>,
    t: f64,
) -> Result<f64> {
    if !teacher.frozen {
        return Err(Error::Frozen("distillation teacher must be frozen".into()));
    }
    z_t.check_same_shape(z_l, "distill_loss")?;
    z_t.check_same_shape(z_l_prime, "distill_loss")?;
    let target = teacher.forward_denoiser(z_t, z_l_prime, t)?;
    let pred = student.forward_denoiser(z_t, z_l, t)?;
    Ok(mse(&pred, &target))
}

pub fn mse<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    let n = a.len().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: NoiseSchedule = NoiseSchedule {
        kind: ScheduleKind::Cosine,
        t_clip: 1e-5,
    };

    #[test]
    fn endpoints_and_midpoint() {
        let a = S.eval(0.0).unwrap();
        assert_eq!((a.alpha, a.sigma), (1.0, 0.0));
        assert!(a.lambda.is_finite() && a.lambda > 20.0);
        let b = S.eval(1.0).unwrap();
        assert_eq!((b.alpha, b.sigma), (0.0, 1.0));
        assert!(b.lambda.is_finite() && b.lambda < -20.0);
        let m = S.eval(0.5).unwrap();
        assert!((m.alpha - 0.7071068).abs() < 1e-7);
        assert!((m.sigma - 0.7071068).abs() < 1e-7);
        assert!(m.lambda.abs() < 1e-12);
        assert!(S.eval(-0.1).is_err() && S.eval(1.1).is_err());
    }

    #[test]
    fn omega_times_sigma_squared_is_one() {
        for t in [0.1, 0.3, 0.5, 0.9] {
            let s = S.eval(t).unwrap();
            assert!(s.omega() >= 1.0);
            assert!((s.omega() * s.sigma * s.sigma - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_and_target_examples() {
        let x = Tensor::<f64>::new([2], vec![1.0, 0.0]).unwrap();
        let e = Tensor::<f64>::new([2], vec![0.0, 1.0]).unwrap();
        assert_eq!(add_noise(&x, &e, 0.0, &S).unwrap(), x);
        assert_eq!(add_noise(&x, &e, 1.0, &S).unwrap(), e);
        let mid = add_noise(&x, &e, 0.5, &S).unwrap();
        assert!(mid.data().iter().all(|v| (v - 0.7071068).abs() < 1e-7));

        assert_eq!(v_target(&x, &e, 0.0, &S).unwrap(), e);
        assert_eq!(v_target(&x, &e, 1.0, &S).unwrap(), x.map(|v| -v));
        let one = Tensor::<f64>::full([1], 1.0);
        let zero = Tensor::<f64>::zeros([1]);
        let v = v_target(&one, &zero, 0.5, &S).unwrap();
        assert!((v.data()[0] + 0.7071068).abs() < 1e-7);
        assert!(add_noise(&one, &x, 0.5, &S).is_err());
    }

    #[test]
    fn from_v_endpoints() {
        let z = Tensor::<f64>::new([2], vec![0.3, -1.2]).unwrap();
        let v = Tensor::<f64>::new([2], vec![0.5, 2.0]).unwrap();
        let (x0, e) = from_v(&z, &v, 1.0, &S).unwrap();
        assert_eq!(x0, v.map(|a| -a));
        assert_eq!(e, z);
        let (x0, e) = from_v(&z, &v, 0.0, &S).unwrap();
        assert_eq!(x0, z);
        assert_eq!(e, v);
    }

    #[test]
    fn noisy_batch_matches_per_sample_ops() {
        let zh = Tensor::<f64>::from_fn([3, 1, 2, 2], |i| i as f64 * 0.1);
        let ep = Tensor::<f64>::from_fn([3, 1, 2, 2], |i| (i as f64).cos());
        let ts = [0.1, 0.5, 0.8];
        let (zt, v) = noisy_batch(&zh, &ep, &ts, &S).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let a = add_noise(&zh.index0(i), &ep.index0(i), t, &S).unwrap();
            let b = v_target(&zh.index0(i), &ep.index0(i), t, &S).unwrap();
            assert!(zt.index0(i).max_abs_diff(&a) < 1e-15);
            assert!(v.index0(i).max_abs_diff(&b) < 1e-15);
        }
    }
}
