//! Named trainable parameters and their gradient buffers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Index of a parameter within its [`ParamStore`]; stable for the lifetime of
/// the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Accumulated gradient, same length as the value; zeroed between
    /// optimizer steps.
    pub grad: Vec<f64>,
}

/// Insertion-ordered collection of named parameters. Names are unique;
/// iteration order is insertion order, which fixes the order of both weight
/// initialization draws and checkpoint records.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.entries.len());
        let grad = vec![0.0; value.numel()];
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Add a matrix initialized `U(-sqrt(1/fan_in), +sqrt(1/fan_in))`,
    /// drawn row-major from `rng`.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let lim = (1.0 / fan_in as f64).sqrt();
        let numel = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.uniform_in(-lim, lim)).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    /// Add an all-zero parameter (biases, layer-norm shifts).
    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    /// Add an all-constant parameter (layer-norm scales).
    pub fn add_full(&mut self, name: &str, shape: Vec<usize>, fill: f64) -> Result<ParamId> {
        let numel = shape.iter().product();
        self.add(name, Tensor::new(shape, vec![fill; numel])?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let g = &mut self.entries[id.0].grad;
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}
