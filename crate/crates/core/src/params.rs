//! Named parameter tensors plus their optimizer moments.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// An ordered collection of uniquely named parameters.
///
/// Insertion order is the canonical order: checkpoints, gradient vectors and
/// optimizer moments all follow it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    pub(crate) first_moment: Vec<Tensor<T>>,
    pub(crate) second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.names.len());
        self.first_moment.push(Tensor::zeros(tensor.shape()));
        self.second_moment.push(Tensor::zeros(tensor.shape()));
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub(crate) fn tensor_at(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    /// Parameter, first moment and second moment at index `i`.
    pub(crate) fn slot_mut(
        &mut self,
        i: usize,
    ) -> (&mut Tensor<T>, &mut Tensor<T>, &mut Tensor<T>) {
        (
            &mut self.tensors[i],
            &mut self.first_moment[i],
            &mut self.second_moment[i],
        )
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Same parameters in another precision, with fresh moments.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.insert(name, t.cast()).expect("names already unique");
        }
        out
    }

    /// Reset optimizer moments to zero.
    pub fn reset_moments(&mut self) {
        for m in self
            .first_moment
            .iter_mut()
            .chain(self.second_moment.iter_mut())
        {
            m.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    /// Glorot/Xavier uniform for a `[fan_in, fan_out]` weight.
    pub fn xavier<T: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        Tensor::matrix(fan_in, fan_out, data).expect("non-empty")
    }

    pub fn normal<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        let data = (0..rows * cols).map(|_| T::of(dist.sample(rng))).collect();
        Tensor::matrix(rows, cols, data).expect("non-empty")
    }

    pub fn zeros<T: Scalar>(rows: usize, cols: usize) -> Tensor<T> {
        Tensor::zeros(&[rows, cols])
    }

    pub fn ones<T: Scalar>(rows: usize, cols: usize) -> Tensor<T> {
        Tensor::full(&[rows, cols], T::one())
    }
}
