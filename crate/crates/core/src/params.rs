//! Named parameter arrays and their binding into a [`Graph`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{precondition, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Shape, Tensor};

/// Parameters of one component, keyed by a stable layer path such as
/// `stage.urdb0.enc1.rdb.dense0.weight`. Iteration order is the key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    arrays: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.arrays.contains_key(&name) {
            return precondition(format!("duplicate parameter name {name}"));
        }
        self.arrays.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.arrays.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.arrays.get(name).ok_or_else(|| crate::error::M2ganError::Config(format!("missing parameter {name}")))
    }

    /// Replace an existing array, keeping its shape.
    pub fn assign(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.arrays.get_mut(name) {
            Some(slot) if slot.shape() == t.shape() => {
                *slot = t;
                Ok(())
            }
            Some(slot) => {
                precondition(format!("parameter {name} has shape {}, cannot assign {}", slot.shape(), t.shape()))
            }
            None => precondition(format!("missing parameter {name}")),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.arrays.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Tensor::len).sum()
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.arrays.len() == other.arrays.len()
            && self.arrays.iter().zip(&other.arrays).all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    /// Deterministic 64-bit fingerprint of names and exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in &self.arrays {
            feed(name.as_bytes());
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Add every leaf to `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .arrays
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph variables of a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| crate::error::M2ganError::Config(format!("unbound parameter {name}")))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collect gradients into a store aligned with `like`; parameters that
    /// did not take part in the graph get zero gradients.
    pub fn gradients(&self, grads: &Gradients, like: &ParamStore) -> ParamStore {
        let arrays = like
            .arrays
            .iter()
            .map(|(k, t)| {
                let g =
                    self.vars.get(k).and_then(|&v| grads.get(v)).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
                (k.clone(), g)
            })
            .collect();
        ParamStore { arrays }
    }
}

/// The seeded generator used for all initialisation and sampling.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = seed ^ 0x9e3779b97f4a7c15;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3).rotate_left(17);
    }
    h
}

/// He-uniform initialisation for a conv kernel `[out, in, k, k]` followed
/// by a leaky ReLU of slope 0.2.
/// Gain for layers followed by a leaky ReLU with slope 0.2.
pub const LEAKY_GAIN: f64 = 1.386_750_490_563_073; // sqrt(2 / 1.04)

/// Uniform kernel with variance `gain² / fan_in`.
pub fn init_kernel(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize, k: usize, gain: f64) -> Tensor {
    let shape = Shape::new(out_ch, in_ch, k, k);
    let bound = gain * (3.0 / (in_ch * k * k) as f64).sqrt();
    let data = (0..shape.numel()).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("kernel shape")
}

pub fn bias_shape(out_ch: usize) -> Shape {
    Shape::new(1, out_ch, 1, 1)
}
