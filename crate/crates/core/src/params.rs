//! Named parameter storage.
//!
//! One store instance backs every consumer of the weights, including both
//! encoder modes: a mutation through `tensor_mut` is observed by the next
//! forward pass of either mode with no copy in between.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STORE_VERSION: &str = "1";

/// Named tensors plus a version tag and a global step counter.
///
/// Names are unique and shapes are frozen at creation time.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
    version: String,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore { tensors: BTreeMap::new(), version: STORE_VERSION.to_string(), step: 0 }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::usage(format!("parameter {name} already exists")));
        }
        self.tensors.insert(name.to_string(), tensor.requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter {name}")))
    }

    /// Exclusive mutable access for optimizer updates. The shape of the
    /// returned tensor must not be changed; updates go through `data_mut`.
    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter {name}")))
    }

    /// Parameter names in deterministic (sorted) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn bump_step(&mut self) {
        self.step += 1;
    }
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}
