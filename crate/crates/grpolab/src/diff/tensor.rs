//! Dense row-major f64 tensors.

use super::{DiffError, DiffResult};

/// A dense tensor of f64 values in row-major order.
///
/// Rank 0 (empty shape) is a scalar; rank 1 a vector; rank 2 a matrix. All
/// entries are finite: construction rejects NaN and infinities, and the
/// expression engine re-checks every node it produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that `data.len()` matches the shape volume
    /// and that every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> DiffResult<Self> {
        let volume: usize = shape.iter().product();
        if data.len() != volume {
            return Err(DiffError::DataLength {
                len: data.len(),
                shape,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFiniteData);
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let volume = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; volume],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 1-D tensor over `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor with `rows * cols` entries in row-major order.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> DiffResult<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single entry of a scalar tensor.
    pub fn scalar_value(&self) -> Option<f64> {
        if self.is_scalar() {
            Some(self.data[0])
        } else {
            None
        }
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
