//! Dense 1-D/2-D tensors of `f64` values.
//!
//! A [`Tensor`] is the plain value type: parameters, cached activations,
//! index rows. Differentiable computation happens on the [`crate::tape`]
//! side; a tensor only carries an optional gradient buffer that the tape
//! accumulates into.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} cannot hold {len} values")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar {
        op: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: empty sequence (valid_len = 0)")]
    EmptySequence { op: &'static str },
    #[error("{op}: index {index} out of range ({len})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Dense row-major array of `f64`, rank 1 or 2, with an optional
/// same-shape gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(TensorError::Invalid {
                op: "Tensor::new",
                msg: format!("rank must be 1 or 2, got shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::BadShape {
                op: "Tensor::new",
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::new(vec![data.len()], data).expect("vector shape always fits")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::vector(vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("zeros shape always fits")
    }

    /// Marks the tensor as a trainable parameter and allocates its
    /// gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Adds `contrib` into the gradient buffer. Repeated calls sum.
    pub fn accumulate_grad(&mut self, contrib: &[f64]) -> Result<(), TensorError> {
        if contrib.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![contrib.len()],
            });
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; contrib.len()]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
        Ok(())
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(TensorError::Invalid {
                op: "dims2",
                msg: format!("expected rank 2, got {:?}", self.shape),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::BadShape { .. }));
    }

    #[test]
    fn rank_limited_to_two() {
        assert!(Tensor::new(vec![2, 2, 2], vec![0.0; 8]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn grad_buffer_matches_shape_and_accumulates() {
        let mut t = Tensor::vector(vec![1.0, 2.0]).with_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
        t.accumulate_grad(&[1.0, 0.5]).unwrap();
        t.accumulate_grad(&[1.0, 0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 1.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
