use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::numerics::{DenseArray, Real, Tape, Var};

/// One named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: DenseArray<T>,
    pub trainable: bool,
    /// Whether AdamW applies decoupled weight decay to this array.
    pub decay: bool,
}

/// Ordered collection of named parameters. Order is part of the identity:
/// optimizer state and checkpoint sections are aligned with it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: DenseArray<T>, decay: bool) -> usize {
        self.params.push(Param { name: name.into(), value, trainable: true, decay });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn value(&self, idx: usize) -> &DenseArray<T> {
        &self.params[idx].value
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Total number of scalar values.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Puts every parameter on the tape as a leaf; trainable ones require grad.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(&p.value, p.trainable)).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable, decay: p.decay })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Replaces values with `other`'s, requiring identical names and shapes.
    pub fn assign(&mut self, other: &ParamStore<T>) -> Result<()> {
        ensure!(self.len() == other.len(), Shape, "param count {} vs {}", self.len(), other.len());
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            ensure!(a.name == b.name && a.value.shape() == b.value.shape(), Shape, "param {} mismatch", a.name);
            a.value = b.value.clone();
        }
        Ok(())
    }
}
