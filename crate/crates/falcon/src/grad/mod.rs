//! Dense-tensor math with reverse-mode automatic differentiation.
//!
//! The engine is define-by-run: each forward pass records primitives on a
//! fresh [`Tape`], and one backward sweep over the recorded operations fills
//! in gradients. Input gradients come out of the same machinery as parameter
//! gradients, which is what the FGSM construction needs.

mod check;
mod tape;

pub use check::grad_check;
pub use tape::{softmax_row_in_place, NodeId, Tape};

use crate::error::{Error, Result};

/// Clamp floor for `log` and division denominators, shared with the loss
/// definitions so `-log(p)` stays finite for vanishing probabilities.
pub const CLAMP_DELTA: f64 = 1e-12;

/// An n-dimensional array of 64-bit floats, row-major.
///
/// Scalars have the empty shape `[]`. A tensor participates in gradient
/// computation when `requires_grad` is set; after a backward pass the caller
/// copies gradients out of the tape into `grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "tensor contains non-finite element {bad}"
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builder-style toggle for gradient participation.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Scalar value; panics on non-scalars (internal misuse, not input data).
    pub fn item(&self) -> f64 {
        assert!(self.data.len() == 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Reinterpret the buffer under a new shape of equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Contract(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows `rows` of a tensor whose first axis indexes samples.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        let row_len: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&self.data[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn scalar_shape_is_empty() {
        let s = Tensor::scalar(3.5);
        assert!(s.is_scalar());
        assert_eq!(s.item(), 3.5);
        assert_eq!(s.numel(), 1);
    }

    #[test]
    fn gather_rows_picks_sample_slices() {
        let t = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = t.gather_rows(&[2, 0]);
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
    }
}
