//! Named parameter storage.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
    trainable: bool,
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order used by optimisers and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Adds a tensor; returns its index. Names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(alloc::format!("duplicate parameter {name}")));
        }
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].name
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].tensor
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| self.tensor(i))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(|i| self.tensor_mut(i))
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.entries[i].trainable
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Replaces the value of an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Invalid(alloc::format!("unknown parameter {name}")))?;
        let have = self.entries[i].tensor.shape();
        if have != tensor.shape() {
            return Err(Error::Shape {
                op: "set parameter",
                detail: alloc::format!("{name}: {:?} vs {:?}", have, tensor.shape()),
            });
        }
        self.entries[i].tensor = tensor;
        Ok(())
    }

    /// Same names and flags with every value converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// He-uniform initialisation for a `(cout, cin, k, k)` kernel.
pub fn he_uniform<T: Real, R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Tensor<T> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let bound = libm::sqrt(6.0 / fan_in);
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Glorot-uniform initialisation, used for linear (non-rectified) layers.
pub fn glorot_uniform<T: Real, R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Tensor<T> {
    let rf = (shape[2] * shape[3]) as f64;
    let bound = libm::sqrt(6.0 / ((shape[0] + shape[1]) as f64 * rf));
    Tensor::uniform(shape, -bound, bound, rng)
}
