//! Dense tensors, reverse-mode gradients and the probability transforms the
//! distillation losses are built from.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Training runs in
//! `f64`; see the aliases at the crate root.

mod graph;
pub(crate) mod kernels;

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};

use crate::error::{invalid, KdError, Result};

pub use graph::{AttnLayout, Gradients, Graph, Var};

/// Floating point element type of tensors, models and losses.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Row-major dense array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return invalid(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// One-dimensional tensor from `f64` values.
    pub fn from_f64(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.iter().map(|&v| S::of(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return invalid("gradient length does not match tensor");
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Size of the last axis; 1 for scalars.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[S] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::of(v.to_f64_lossy())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

fn check_finite<S: Scalar>(values: &[S]) -> Result<()> {
    if values.iter().any(|v| v.is_nan()) {
        return invalid("NaN in logits");
    }
    if values.iter().any(|v| v.is_infinite()) {
        return invalid("non-finite logits");
    }
    Ok(())
}

/// Softmax of `logits / temperature` along the last axis.
pub fn softmax_with_temperature<S: Scalar>(logits: &Tensor<S>, temperature: S) -> Result<Tensor<S>> {
    if !(temperature > S::zero()) || !temperature.is_finite() {
        return Err(KdError::InvalidArgument(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    check_finite(logits.data())?;
    let width = logits.last_dim();
    let mut out = vec![S::zero(); logits.len()];
    let mut scaled = vec![S::zero(); width];
    for (src, dst) in logits.data().chunks(width).zip(out.chunks_mut(width)) {
        for (s, &z) in scaled.iter_mut().zip(src) {
            *s = z / temperature;
        }
        kernels::softmax_row(&scaled, dst);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Log-softmax along the last axis.
pub fn log_softmax<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    check_finite(logits.data())?;
    let width = logits.last_dim();
    let mut out = vec![S::zero(); logits.len()];
    for (src, dst) in logits.data().chunks(width).zip(out.chunks_mut(width)) {
        kernels::log_softmax_row(src, dst);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn temperature_examples() {
        let even = softmax_with_temperature(&Tensor::<f64>::from_f64(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(even.data(), &[0.5, 0.5]);

        let z = Tensor::<f64>::from_f64(&[0.0, 3f64.ln()]);
        let p = softmax_with_temperature(&z, 1.0).unwrap();
        assert_abs_diff_eq!(p.data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p.data()[1], 0.75, epsilon = 1e-15);

        // e^{2 ln 3} = 9, so 1/10 and 9/10
        let sharp = softmax_with_temperature(&z, 0.5).unwrap();
        assert_abs_diff_eq!(sharp.data()[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(sharp.data()[1], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn bad_temperature_and_nan_rejected() {
        let z = Tensor::<f64>::from_f64(&[1.0, 2.0]);
        assert!(softmax_with_temperature(&z, 0.0).is_err());
        assert!(softmax_with_temperature(&z, -1.0).is_err());
        assert!(softmax_with_temperature(&z, f64::INFINITY).is_err());
        assert!(softmax_with_temperature(&z, f64::NAN).is_err());
        let nan = Tensor::<f64>::from_f64(&[f64::NAN, 0.0]);
        assert!(softmax_with_temperature(&nan, 1.0).is_err());
        assert!(log_softmax(&nan).is_err());
    }

    #[test]
    fn log_softmax_is_stable() {
        let ls = log_softmax(&Tensor::<f64>::from_f64(&[1000.0, 0.0])).unwrap();
        assert!(ls.data().iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(ls.data()[0], 0.0, epsilon = 1e-300);
        let even = log_softmax(&Tensor::<f64>::from_f64(&[0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(even.data()[0], -(2f64.ln()), epsilon = 1e-15);
    }

    #[test]
    fn rows_are_independent() {
        let z = Tensor::<f64>::new(vec![2, 2], vec![0.0, 0.0, 0.0, 3f64.ln()]).unwrap();
        let p = softmax_with_temperature(&z, 1.0).unwrap();
        assert_abs_diff_eq!(p.row(0)[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.row(1)[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn works_in_single_precision() {
        let z = Tensor::<f32>::from_f64(&[0.0, 3f64.ln()]);
        let p = softmax_with_temperature(&z, 1.0).unwrap();
        assert!((p.data()[1] - 0.75).abs() < 1e-6);
    }
}
