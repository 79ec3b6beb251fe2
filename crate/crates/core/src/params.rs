//! Named parameter storage and the glue that binds parameters into a
//! [`Graph`] for one forward pass.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::graph::{Grads, Graph, Var};
use crate::tensor::{hex_digest, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: BTreeMap::new() }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over every parameter, in registration order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            h.update(v.checksum().as_bytes());
        }
        hex_digest(&h.finalize())
    }

    /// Checksum of the parameters whose name starts with `prefix`.
    pub fn checksum_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            h.update(v.checksum().as_bytes());
        }
        hex_digest(&h.finalize())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replace values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), String> {
        if other.names != self.names {
            return Err("parameter names differ".into());
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err("parameter shapes differ".into());
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.values.iter().map(|v| Tensor::zeros(v.shape())).collect()
    }
}

/// Seeded initializers. Bounds follow the usual `1/sqrt(fan_in)` uniform rule.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform<T: Float>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| T::of(self.rng.random_range(-bound..bound))).collect())
    }

    pub fn fan_in<T: Float>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.uniform(shape, 1.0 / (fan_in as f64).sqrt())
    }
}

/// Maps parameters of one store to graph leaves for a single forward pass.
pub struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    trainable: bool,
    vars: Vec<Option<Var>>,
}

impl<'a, T: Float> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self { store, trainable, vars: vec![None; store.len()] }
    }

    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self::new(store, false)
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn var(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = g.leaf(self.store.get(id).clone(), self.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Add this pass's parameter gradients into `acc` (aligned with the store).
    /// Returns how many parameters received a gradient.
    pub fn accumulate(&self, grads: &Grads<T>, acc: &mut [Tensor<T>]) -> usize {
        assert_eq!(acc.len(), self.vars.len(), "gradient buffer size");
        let mut n = 0;
        for (slot, var) in acc.iter_mut().zip(&self.vars) {
            if let Some(g) = var.and_then(|v| grads.get(v)) {
                slot.add_assign(g);
                n += 1;
            }
        }
        n
    }

    /// Parameter ids that were bound and received a gradient.
    pub fn ids_with_grad(&self, grads: &Grads<T>) -> Vec<ParamId> {
        self.vars
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some_and(|v| grads.get(v).is_some()))
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}
