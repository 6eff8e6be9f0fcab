use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{GradMap, ParamSet};
use crate::tensor::{Element, Tensor};

/// Bias-corrected Adam. Moment buffers are created lazily per parameter name.
#[derive(Debug, Clone)]
pub struct AdamState<E: Element = f32> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<E>>,
    pub v: BTreeMap<String, Tensor<E>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
}

impl<E: Element> AdamState<E> {
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
        }
    }
}

/// One Adam update. Parameters without an entry in `grads` are treated as
/// having a zero gradient.
pub fn adam_step<E: Element>(params: &mut ParamSet<E>, grads: &GradMap<E>, state: &mut AdamState<E>) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let (eb1, eb2) = (E::from_f64_lossy(b1), E::from_f64_lossy(b2));
    let (one_b1, one_b2) = (E::from_f64_lossy(1.0 - b1), E::from_f64_lossy(1.0 - b2));
    let step_size = E::from_f64_lossy(state.lr / bc1);
    let inv_sqrt_bc2 = E::from_f64_lossy(1.0 / bc2.sqrt());
    let eps = E::from_f64_lossy(state.eps_adam);

    for (name, p) in params.iter_mut() {
        let shape = p.shape().to_vec();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
        let g = grads.get(name);
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.map_or(E::zero(), |g| g.data()[i]);
            md[i] = eb1 * md[i] + one_b1 * gi;
            vd[i] = eb2 * vd[i] + one_b2 * gi * gi;
            pd[i] -= step_size * md[i] / (vd[i].sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::full([1], p)).unwrap();
        ps
    }

    fn grad(g: f64) -> GradMap<f64> {
        GradMap::from([("p".to_string(), Tensor::full([1], g))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = single(0.7);
        let mut st = AdamState::new(0.1);
        adam_step(&mut ps, &grad(0.0), &mut st).unwrap();
        assert_eq!(ps.get("p").unwrap().data(), &[0.7]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = −lr / (1 + eps).
        let mut ps = single(0.0);
        let mut st = AdamState::new(0.1);
        adam_step(&mut ps, &grad(1.0), &mut st).unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        assert!((ps.get("p").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn repeated_gradient_moves_monotonically() {
        let mut ps = single(1.0);
        let mut st = AdamState::new(0.05);
        let mut last = 1.0;
        for _ in 0..2 {
            adam_step(&mut ps, &grad(0.3), &mut st).unwrap();
            let now = ps.get("p").unwrap().data()[0];
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ps = single(0.0);
        let mut st = AdamState::new(0.1);
        let g = GradMap::from([("p".to_string(), Tensor::full([2], 1.0))]);
        assert!(adam_step(&mut ps, &g, &mut st).is_err());
        assert_eq!(st.step, 0);
    }
}
