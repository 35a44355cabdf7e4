//! Dense 64-bit tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is the universal value type: a row-major `Vec<f64>` plus a
//! shape, an optional gradient buffer, and a `requires_grad` flag.
//! Differentiable computation happens through a [`Tape`]: operations are
//! applied eagerly (values computed immediately) while the tape records
//! enough to replay the chain rule in reverse. See [`tape`] for the op set.
//!
//! Everything is f64 and single-threaded per step; identical inputs and
//! seeds produce bit-identical outputs.

mod conv;
mod params;
pub mod tape;

pub use params::ParameterSet;
pub use tape::{Activation, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense n-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, validating that the shape is non-empty with positive
    /// dims and that `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Dimension("tensor shape must be non-empty".into()));
        }
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "tensor dims must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: valid shape")
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("full: valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    /// Standard-normal entries scaled by `sigma`, drawn from `rng`.
    pub fn randn<R: Rng>(shape: Vec<usize>, sigma: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(shape, data).expect("randn: valid shape")
    }

    /// Stacks equal-length rows into a 2-D tensor.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dimension("from_rows: no rows".into()));
        }
        let w = rows[0].len();
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::Dimension("from_rows: ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), w], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor (product of all non-leading dims otherwise).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row `i` of a 2-D view (leading dim × rest).
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.cols();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// 2-D element access.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.ndim(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.ndim(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns a detached copy: same values, no gradient tracking.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Largest absolute entry (0 for the empty gradient case).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Squared Frobenius norm of the whole tensor.
    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// max-norm relative difference between two equally-shaped buffers,
/// normalized by max(1, |a|_inf, |b|_inf).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0f64;
    let mut scale = 1.0f64;
    for (x, y) in a.iter().zip(b) {
        diff = diff.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    diff / scale
}
