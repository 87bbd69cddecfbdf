//! Named parameter storage and deterministic initialization.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, requires_grad: bool) -> Bound<T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| Var::leaf(t.clone().with_requires_grad(requires_grad)))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Order-sensitive FNV-1a digest over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for (_, name, t) in self.iter() {
            eat(name.as_bytes());
            for d in t.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_f64().unwrap().to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Graph leaves for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone)]
pub struct Bound<T: Real> {
    vars: Vec<Var<T>>,
}

impl<T: Real> Bound<T> {
    pub fn from_vars(vars: Vec<Var<T>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

/// Seeded parameter initializer. Values are drawn in `f64` so `f32` and
/// `f64` models built from the same seed agree up to rounding.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Real>(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
    }

    /// Conv/linear weights: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, where fan-in
    /// is the product of all but the leading dim.
    pub fn fan_in<T: Real>(&mut self, shape: Vec<usize>) -> Tensor<T> {
        let fan_in: usize = shape[1..].iter().product();
        self.uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    /// Linear weights stored as `(in, out)` so tokens multiply on the left.
    pub fn linear<T: Real>(&mut self, d_in: usize, d_out: usize) -> Tensor<T> {
        self.uniform(vec![d_in, d_out], 1.0 / (d_in.max(1) as f64).sqrt())
    }
}
