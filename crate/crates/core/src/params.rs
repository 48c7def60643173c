//! Flat registry of named, trainable parameter buffers.
//!
//! Models register parameters once at construction; the training loop reads
//! and writes them through `ParamId` handles. Keeping them in one place makes
//! gradient export, the optimizer, and checkpointing straightforward.

use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal { std: f64 },
    Zeros,
    Ones,
}

#[derive(Clone)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
}

#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        self.entries.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            grad: vec![0.0; n],
        });
        ParamId(self.entries.len() - 1)
    }

    /// Register with externally supplied values (checkpoint restore).
    pub fn register_raw(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::contract(
                "register_raw",
                format!("param `{name}`: shape {:?} wants {} values, got {}", shape, n, data.len()),
            ));
        }
        let grad = vec![0.0; n];
        self.entries.push(Entry { name: name.to_string(), shape: shape.to_vec(), data, grad });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        for (slot, g) in self.entries[id.0].grad.iter_mut().zip(grad) {
            *slot += g;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }
}
