//! Dense row-major tensors generic over the floating-point precision.
//!
//! The whole pipeline runs on one storage type: a flat `Vec<F>` plus a shape.
//! Rank-3 tensors use height × width × channels (HWC) layout so that the
//! innermost stride is the channel axis — the hot conv/correlation loops
//! accumulate over contiguous channel runs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::{Error, Result};

/// Floating-point element trait: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into the active precision.
#[inline]
pub fn num<F: Scalar>(x: f64) -> F {
    F::from(x).expect("f64 literal convertible to scalar type")
}

/// Dense row-major tensor with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    values: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor from a shape and matching flat value buffer.
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor { shape, values, grad: None })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![F::zero(); numel], grad: None }
    }

    /// Constant-filled tensor of the given shape.
    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![value; numel], grad: None }
    }

    /// Single-element tensor holding one scalar.
    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![1], values: vec![value], grad: None }
    }

    /// Tensor whose flat element `i` is `f(i)`.
    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, values: (0..numel).map(f).collect(), grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    /// Consumes the tensor, returning the flat value buffer.
    pub fn into_values(self) -> Vec<F> {
        self.values
    }

    /// Gradient buffer, if one has been attached.
    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Replaces the gradient buffer; the caller guarantees matching length.
    pub fn set_grad(&mut self, grad: Vec<F>) {
        debug_assert_eq!(grad.len(), self.values.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Interprets the tensor as height × width × channels.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            other => Err(Error::shape(format!("expected rank-3 HWC tensor, got {other:?}"))),
        }
    }

    /// Flat index of `(y, x, c)` in HWC layout.
    #[inline]
    pub fn index3(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape[1] + x) * self.shape[2] + c
    }

    /// Element access by HWC coordinates (test/convenience path, not hot).
    pub fn at3(&self, y: usize, x: usize, c: usize) -> F {
        self.values[self.index3(y, x, c)]
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Elementwise copy into another precision.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .map(|&v| G::from(v.to_f64().expect("finite value")).expect("cast"))
                .collect(),
            grad: None,
        }
    }

    /// Sum of all elements.
    pub fn sum(&self) -> F {
        self.values.iter().copied().sum()
    }

    /// Euclidean norm of the value buffer.
    pub fn l2_norm(&self) -> F {
        self.values.iter().map(|&v| v * v).sum::<F>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_buffer() {
        let err = Tensor::new(vec![2, 3], vec![0.0f32; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "got {err:?}");
    }

    #[test]
    fn hwc_indexing_is_row_major_channels_last() {
        let t = Tensor::<f32>::from_fn(vec![2, 3, 4], |i| i as f32);
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 0, 3), 3.0);
        assert_eq!(t.at3(0, 1, 0), 4.0);
        assert_eq!(t.at3(1, 0, 0), 12.0);
        assert_eq!(t.at3(1, 2, 3), 23.0);
    }

    #[test]
    fn cast_round_trips_between_precisions() {
        let t = Tensor::<f32>::from_fn(vec![5], |i| i as f32 * 0.25);
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }

    #[test]
    fn all_finite_detects_nan() {
        let mut t = Tensor::<f64>::zeros(vec![3]);
        assert!(t.all_finite());
        t.values_mut()[1] = f64::NAN;
        assert!(!t.all_finite());
    }
}
