//! Named parameter storage and binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named parameters in deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

pub type GradMap = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
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

    /// Copies every parameter of `other` into `self`, overwriting.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// He-uniform initialisation: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Conv weight `[out, in, k, k]` with He-uniform init.
pub fn conv_weight(out: usize, inp: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    he_uniform(&[out, inp, k, k], inp * k * k, rng)
}

/// Dense weight `[in, out]` with He-uniform init.
pub fn dense_weight(inp: usize, out: usize, rng: &mut impl Rng) -> Tensor {
    he_uniform(&[inp, out], inp, rng)
}

/// Lazily places parameters on a tape and maps gradients back to names.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: BTreeMap<String, Var>,
    frozen: Vec<String>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder {
            store,
            vars: BTreeMap::new(),
            frozen: Vec::new(),
        }
    }

    /// Parameters under any of these prefixes are bound without gradient.
    pub fn freeze(mut self, prefixes: &[&str]) -> Self {
        self.frozen.extend(prefixes.iter().map(|p| p.to_string()));
        self
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = tape.leaf(t, self.is_trainable(name));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradient for every trainable parameter in the store; unbound or
    /// unreached parameters get zeros.
    pub fn gradients(&self, grads: &mut Gradients) -> GradMap {
        self.store
            .iter()
            .filter(|(name, _)| self.is_trainable(name))
            .map(|(name, t)| {
                let g = match self.vars.get(name) {
                    Some(v) => grads.take(*v),
                    None => Tensor::zeros(t.shape()),
                };
                (name.clone(), g)
            })
            .collect()
    }
}

/// `acc += g`, inserting entries that are not yet present.
pub fn accumulate(acc: &mut GradMap, g: GradMap) {
    for (k, v) in g {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&v),
            None => {
                acc.insert(k, v);
            }
        }
    }
}

pub fn scale_grads(g: &mut GradMap, s: f32) {
    for t in g.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}
