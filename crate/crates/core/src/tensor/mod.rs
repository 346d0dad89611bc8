//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Graph`] records every operation applied to its nodes in topological
//! order. [`Graph::backward`] walks that record in reverse, so each node is
//! visited exactly once and fan-out gradients accumulate additively.
//!
//! All kernels are generic over [`Real`], which is implemented for `f32` (the
//! default training precision) and `f64` (used by the gradient-check suites).

mod conv;
pub mod gradcheck;
mod graph;
mod kernels;
mod real;

pub use conv::Conv2dSpec;
pub use graph::{Graph, Var};
pub use kernels::{bilinear_resize, PoolKind};
pub use real::Real;

use crate::error::{dim_err, Result};

/// Dense row-major n-dimensional array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Accumulated gradient, same shape as `data` when present.
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err(format!("zero-sized dimension in shape {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same values in a different shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Converts every element, dropping any gradient.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return dim_err(format!(
                "gradient of length {} for tensor of shape {:?}",
                delta.len(),
                self.shape
            ));
        }
        match self.grad.as_mut() {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a multi-index; panics on out-of-range indices.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of range for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }
}
