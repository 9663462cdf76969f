use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_STORE_TAG: AtomicU64 = AtomicU64::new(1);

/// Handle of one parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named trainable tensors of one network plus their accumulated gradients.
///
/// Every store carries a process-unique tag so a tape can route parameter
/// gradients back to the store they were read from.
#[derive(Debug)]
pub struct ParamStore<T> {
    tag: u64,
    params: Vec<Param<T>>,
    reads: AtomicU64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            reads: AtomicU64::new(0),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            reads: AtomicU64::new(0),
        }
    }

    pub(crate) fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform weight in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn iter_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Number of times a tape has read a parameter from this store.
    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub(crate) fn note_read(&self) {
        self.reads.fetch_add(1, Ordering::Relaxed);
    }

    /// Overwrite the value of `name`, checking the shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, blob has {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}
