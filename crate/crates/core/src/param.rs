//! Trainable parameters: a named value plus an accumulated gradient buffer.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter. Used by [`crate::graph::Graph`] to
/// map leaf nodes back onto parameters; cloning a parameter yields a new id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros_like(&value);
        Self {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::ones(shape))
    }

    /// Normal(0, std) initialization.
    pub fn normal<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Self {
        let dist = Normal::new(0.0, std).expect("finite, non-negative std");
        let mut value = Tensor::zeros(shape);
        for v in value.data_mut() {
            *v = dist.sample(rng);
        }
        Self::new(name, value)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

impl Clone for Parameter {
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
        }
    }
}

/// Anything that owns parameters in a fixed, stable order.
pub trait Module {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }
}
