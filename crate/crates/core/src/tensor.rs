//! Dense row-major f64 tensor. The sole numeric carrier for the whole crate.
//!
//! Tensors are immutable after construction and cheap to clone (the payload
//! is behind an `Arc`), which makes them safe to share across threads and to
//! capture inside tape nodes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Construct from a flat row-major buffer. Validates that extents are
    /// positive, that the element count matches, and that every value is
    /// finite — non-finite payloads are a reportable error, never silent.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements but buffer holds {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite value {bad} in tensor of shape {shape:?}"
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Scalar (shape `[1]`) tensor.
    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel_of(&shape);
        assert!(n > 0, "zeros() requires positive extents");
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Result<Tensor> {
        let n = numel_of(&shape);
        Tensor::from_vec(shape, vec![v; n])
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            shape: vec![n, n],
            data: Arc::new(data),
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Result<Tensor> {
        let n = numel_of(&shape);
        Tensor::from_vec(shape, (0..n).map(&mut f).collect())
    }

    /// Truncated normal draw (±2σ), the standard weight initializer here.
    pub fn truncated_normal(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Tensor {
        let n = numel_of(&shape);
        let data: Vec<f64> = (0..n).map(|_| rng.truncated_normal(std)).collect();
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    /// Uniform draw in [lo, hi), for test fixtures.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
        let n = numel_of(&shape);
        let data: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.next_f64()).collect();
        Tensor {
            shape,
            data: Arc::new(data),
        }
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

    /// Interpret as a matrix, returning (rows, cols). Rank-1 tensors are not
    /// implicitly promoted; callers must be explicit.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    /// Rows of the leading axis times the trailing axis length; treats any
    /// rank-≥1 tensor as `(numel/last, last)` for per-row operations.
    pub fn rows_last(&self) -> (usize, usize) {
        let last = *self.shape.last().expect("non-empty shape");
        (self.numel() / last, last)
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bit-exact equality of shape and payload.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Value with every element snapped through f32 precision. Used when a
    /// checkpoint is declared with a 32-bit payload dtype.
    pub fn snap_f32(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| v as f32 as f64).collect()),
        }
    }

}
