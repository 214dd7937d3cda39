//! Dense-tensor numeric core with reverse-mode automatic differentiation.
//!
//! Big enough for MLPs, small CNNs, and logistic regression; nothing more.
//! Tensors are immutable once created and cheap to clone (shared storage).
//! A [`Tape`] records primitive operations in topological order; a backward
//! pass over a scalar root yields exact gradients for every leaf created
//! with `requires_grad`.
//!
//! Two precision modes are supported through the [`Scalar`] trait: `f32`
//! for training speed, `f64` where oracle-grade accuracy is needed.

mod tape;
mod tensor;

pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{Precision, Scalar, Tensor};

/// Flat per-parameter gradient aligned with a parameter store's global
/// index (length = total trainable parameter count).
#[derive(Clone, Debug)]
pub struct GradientVector<S: Scalar> {
    values: Vec<S>,
}

impl<S: Scalar> GradientVector<S> {
    pub fn new(values: Vec<S>) -> Self {
        GradientVector { values }
    }

    pub fn zeros(len: usize) -> Self {
        GradientVector {
            values: vec![S::ZERO; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }
}
