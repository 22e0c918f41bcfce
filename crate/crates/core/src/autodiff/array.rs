//! Dense row-major `f64` arrays. Rank 0 is a scalar, rank 1 a vector,
//! rank 2 a matrix; nothing in the crate needs more.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ArrayError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("expected a matrix, got rank-{0} array")]
    NotMatrix(usize),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

/// Immutable-by-convention dense array. The graph never mutates a value
/// after the node is created; parameter stores mutate their own copies
/// between iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ArrayError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(ArrayError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    /// Rank-2 convenience constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ArrayError> {
        Self::from_vec(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar extraction; errors unless the array holds exactly one element.
    pub fn as_scalar(&self) -> Result<f64, ArrayError> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(ArrayError::NotScalar(self.shape.clone()))
        }
    }

    /// (rows, cols) of a rank-2 array.
    pub fn dims2(&self) -> Result<(usize, usize), ArrayError> {
        if self.rank() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(ArrayError::NotMatrix(self.rank()))
        }
    }

    /// Length of the trailing axis; a scalar has row length 1. Reductions and
    /// row-wise ops (softmax, layernorm) treat the array as
    /// `numel / row_len` rows.
    pub fn row_len(&self) -> usize {
        self.shape.last().copied().unwrap_or(1).max(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute difference against another array of the same shape.
    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
