//! Dense row-major `f64` tensors: the value type everything else computes on.
//!
//! A [`Tensor`] is plain data. Gradients live in the optional `grad` buffer and
//! are populated by regime steps after a backward pass; the computation graph
//! itself is held by [`crate::tape::Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shaped array of 64-bit reals with an optional same-shape gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that the extents are positive, the data
    /// length matches the shape, and every value is finite.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                details: format!("extents must be positive, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                details: format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            });
        }
        let t = Tensor { shape, data, grad: None };
        t.check_finite("tensor")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], grad: None }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, grad: None }
    }

    /// Row-major matrix from nested rows. All rows must share a length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch { op: "tensor", details: "ragged rows".into() });
        }
        Tensor::from_vec(vec![r, c], rows.concat())
    }

    /// Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(shape: &[usize], rng: &mut impl Rng) -> Self {
        let (fan_in, fan_out) = match shape {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            other => {
                // conv kernels [out, in, k]: fan counts include the kernel width
                let k: usize = other[2..].iter().product();
                (other[1] * k, other[0] * k)
            }
        };
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-s..s)).collect();
        Tensor { shape: shape.to_vec(), data, grad: None }
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Overwrites the gradient buffer; `g` must match the tensor's length.
    pub fn set_grad(&mut self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.data.len());
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Row `i` of a 2-D tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op,
                details: format!("element {i} of shape {:?} is {}", self.shape, self.data[i]),
            });
        }
        Ok(())
    }
}

/// Index of the largest element; first occurrence wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_data_mismatch_rejected() {
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::from_vec(vec![0], vec![]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let err = Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::glorot(&[10, 20], &mut rng);
        let s = (6.0 / 30.0f64).sqrt();
        assert!(a.data().iter().all(|v| v.abs() < s));

        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let b = Tensor::glorot(&[10, 20], &mut rng2);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn argmax_first_tie_wins() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
