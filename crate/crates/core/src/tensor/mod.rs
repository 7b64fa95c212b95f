//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.

mod gradcheck;
mod graph;
pub(crate) mod ops;
mod params;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, ParamId, ParamStore};

use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Row-major values behind a shared, copy-on-write buffer: clones and
/// reshapes never copy, the first mutation of a shared buffer does.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        if shape.contains(&0) {
            return Err(shape_err("tensor", format!("zero extent in {shape:?}")));
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                    .collect(),
            ),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }
}
