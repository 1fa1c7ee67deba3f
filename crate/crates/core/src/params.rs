//! Named parameter tensors.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MissError, Result};
use crate::graph::Tensor;

/// Ordered map from parameter name to tensor. Iteration order is the sorted
/// name order, which fixes the order of every optimizer and checkpoint pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Copy of the parameters whose names start with any of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { tensors }
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| MissError::UnknownParam(name.to_string()))
    }
}

/// Deterministic initializer shared by all model components.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub std: f64,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal(&mut self, name: String, rows: usize, cols: usize) {
        let dist = Normal::new(0.0, self.std).expect("positive std");
        let t = Tensor::from_shape_fn((rows, cols), |_| dist.sample(self.rng));
        self.store.insert(name, t);
    }

    pub fn zeros(&mut self, name: String, rows: usize, cols: usize) {
        self.store.insert(name, Tensor::zeros((rows, cols)));
    }

    pub fn fill(&mut self, name: String, rows: usize, cols: usize, value: f64) {
        self.store.insert(name, Tensor::from_elem((rows, cols), value));
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.normal(format!("{prefix}.w"), fan_in, fan_out);
        self.zeros(format!("{prefix}.b"), 1, fan_out);
    }

    pub fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.fill(format!("{prefix}.g"), 1, width, 1.0);
        self.zeros(format!("{prefix}.b"), 1, width);
    }
}
