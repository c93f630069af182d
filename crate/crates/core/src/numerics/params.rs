use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.insert_with(name, t, true)
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.insert_with(name, t, false)
    }

    fn insert_with(&mut self, name: impl Into<String>, t: Tensor<T>, trainable: bool) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
            self.trainable[i] = trainable;
            return i;
        }
        let i = self.names.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(trainable);
        i
    }

    /// Normal(0, std²) initialization drawn from `rng`.
    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> usize {
        let numel = shape.iter().product();
        let data = if std == 0.0 {
            vec![T::zero(); numel]
        } else {
            let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
            (0..numel).map(|_| T::of(normal.sample(rng))).collect()
        };
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.id(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn by_id(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn by_id_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn set_trainable(&mut self, i: usize, on: bool) {
        self.trainable[i] = on;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }

    /// Copy every tensor whose name starts with `prefix` from `other`.
    pub fn absorb(&mut self, other: &ParamSet<T>, prefix: &str, trainable: bool) {
        for (name, t) in other.iter() {
            if name.starts_with(prefix) {
                self.insert_with(name, t.clone(), trainable);
            }
        }
    }
}
