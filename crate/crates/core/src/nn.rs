//! Named parameter sets and the small layer vocabulary shared by the
//! denoiser and the autoencoder.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Parameters keyed by a stable dotted name. Iteration order is the sorted
/// name order, which keeps serialization and gradient reduction deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<E: Element = f32> {
    tensors: BTreeMap<String, Tensor<E>>,
}

pub type GradMap<E = f32> = BTreeMap<String, Tensor<E>>;

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<E>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<E>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<E>> {
        self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<E>>) -> Self {
        Self { tensors }
    }

    /// FNV-1a over names, shapes and value bit patterns.
    pub fn fingerprint(&self) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, t) in &self.tensors {
            feed(name.as_bytes());
            for &d in t.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                feed(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Places every tensor on `tape`; trainable sets become gradient leaves.
    pub fn bind(&self, tape: &mut Tape<E>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn cast<F: Element>(&self) -> ParamSet<F> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
        }
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unbound parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Runs `loss_fn` on a fresh tape with `params` bound as trainable leaves and
/// returns the loss with one gradient per parameter.
pub fn loss_and_grads<E, F>(params: &ParamSet<E>, loss_fn: F) -> Result<(E, GradMap<E>)>
where
    E: Element,
    F: FnOnce(&mut Tape<E>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let root = loss_fn(&mut tape, &bound)?;
    let loss = tape.value(root);
    if loss.len() != 1 {
        return Err(Error::InvalidArgument("loss must be a scalar".into()));
    }
    let loss = loss.data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let mut grads = tape.backward(root)?;
    let mut out = GradMap::new();
    for (name, var) in bound.iter() {
        let g = grads
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(params.get(name).map(|t| t.shape().to_vec()).unwrap_or_default()));
        out.insert(name.clone(), g);
    }
    Ok((loss, out))
}

/// Largest group count ≤ 8 that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Kaiming-uniform (fan-in, ReLU gain) sample for a weight tensor.
pub fn kaiming_uniform<E: Element>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| E::from_f64_lossy(rng.gen_range(-bound..bound)))
}

/// Parameter-set builder used by network constructors.
pub(crate) struct Init<'a, E: Element> {
    pub params: ParamSet<E>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, E: Element> Init<'a, E> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            params: ParamSet::new(),
            rng,
        }
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Result<()> {
        let shape = [cout, cin, k, k];
        let w = if zero {
            Tensor::zeros(shape)
        } else {
            kaiming_uniform(&shape, cin * k * k, self.rng)
        };
        self.params.insert(format!("{name}.w"), w)?;
        self.params.insert(format!("{name}.b"), Tensor::zeros([cout]))
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<()> {
        let w = kaiming_uniform(&[dout, din], din, self.rng);
        self.params.insert(format!("{name}.w"), w)?;
        self.params.insert(format!("{name}.b"), Tensor::zeros([dout]))
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.params.insert(format!("{name}.g"), Tensor::full([c], E::one()))?;
        self.params.insert(format!("{name}.b"), Tensor::zeros([c]))
    }
}

/// Layer calls that resolve parameter names against a [`Bound`] set.
pub(crate) struct Layers<'a> {
    pub bound: &'a Bound,
}

impl Layers<'_> {
    pub fn conv<E: Element>(&self, tape: &mut Tape<E>, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.bound.var(&format!("{name}.w"))?;
        let b = self.bound.var(&format!("{name}.b"))?;
        let k = tape.shape(w)[2];
        tape.conv2d(x, w, Some(b), stride, k / 2)
    }

    pub fn linear<E: Element>(&self, tape: &mut Tape<E>, name: &str, x: Var) -> Result<Var> {
        let w = self.bound.var(&format!("{name}.w"))?;
        let b = self.bound.var(&format!("{name}.b"))?;
        tape.linear(x, w, b)
    }

    pub fn norm<E: Element>(&self, tape: &mut Tape<E>, name: &str, x: Var) -> Result<Var> {
        let g = self.bound.var(&format!("{name}.g"))?;
        let b = self.bound.var(&format!("{name}.b"))?;
        let c = tape.shape(x)[1];
        tape.group_norm(x, g, b, norm_groups(c))
    }

    pub fn norm_silu<E: Element>(&self, tape: &mut Tape<E>, name: &str, x: Var) -> Result<Var> {
        let y = self.norm(tape, name, x)?;
        Ok(tape.silu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_divide_channels() {
        assert_eq!(norm_groups(16), 8);
        assert_eq!(norm_groups(4), 4);
        assert_eq!(norm_groups(12), 6);
        assert_eq!(norm_groups(3), 3);
        for c in 1..100 {
            assert_eq!(c % norm_groups(c), 0);
        }
    }

    #[test]
    fn sum_of_squares_of_one_parameter_has_gradient_2p() {
        let mut ps = ParamSet::<f64>::new();
        let p = Tensor::from_fn([3, 2], |i| i as f64 - 2.5);
        ps.insert("p", p.clone()).unwrap();
        ps.insert("q", Tensor::full([2], 4.0)).unwrap();
        let (loss, g) = loss_and_grads(&ps, |tape, b| Ok(tape.sum_square(b.var("p")?))).unwrap();
        assert_eq!(loss, p.data().iter().map(|x| x * x).sum::<f64>());
        assert_eq!(g["p"], p.map(|x| 2.0 * x));
        assert!(g["q"].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn loss_independent_of_params_gives_zero_gradients() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("a", Tensor::full([4], 1.5)).unwrap();
        let (loss, g) = loss_and_grads(&ps, |tape, _| {
            let c = tape.constant(Tensor::full([2], 3.0));
            Ok(tape.sum_square(c))
        })
        .unwrap();
        assert_eq!(loss, 18.0);
        assert!(g["a"].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("a", Tensor::full([1], f32::INFINITY)).unwrap();
        let r = loss_and_grads(&ps, |tape, b| Ok(tape.sum_square(b.var("a")?)));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn fingerprint_tracks_single_bit_changes() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("a", Tensor::full([4], 1.0)).unwrap();
        let before = ps.fingerprint();
        ps.get_mut("a").unwrap().data_mut()[2] = f32::from_bits(1.0f32.to_bits() + 1);
        assert_ne!(before, ps.fingerprint());
    }
}
