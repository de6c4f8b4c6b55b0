//! Dense `f64` tensors with an eager gradient tape.
//!
//! Values live in [`Tensor`]; computations are recorded on a [`Tape`] and
//! addressed through [`Var`] handles. Node indices are assigned in creation
//! order, so the tape is already topologically sorted and
//! [`Tape::backward`] simply walks it in reverse.

mod ops;
mod tape;

pub(crate) use ops::matmul_raw;
pub use tape::{BackwardCtx, BackwardFn, Gradients, Tape, Var};

use std::borrow::BorrowMut;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{QfaError, Result};

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(QfaError::Dimension(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(QfaError::Dimension(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Internal constructor for shapes already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_parts(vec![n], data)
    }

    /// Marks the tensor as a trainable parameter.
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        match self.grad.as_mut() {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }
}

/// Serializes a single-element trainable tensor as a bare number.
pub mod scalar_param {
    use super::*;

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> std::result::Result<S::Ok, S::Error> {
        t.item().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Tensor, D::Error> {
        Ok(Tensor::scalar(f64::deserialize(d)?).with_grad())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
///
/// Returns the norm measured before clipping. Parameters without a
/// gradient count as zero.
pub fn global_grad_norm_clip<T: BorrowMut<Tensor>>(params: &mut [T], max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|p| p.borrow().grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.borrow_mut().grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
    norm
}

/// Round half to even.
#[inline]
pub fn round_half_even(x: f64) -> f64 {
    // adding and removing 1.5·2^52 rounds to an integer in the default
    // ties-to-even mode without a libm call
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    if x.abs() < 4_503_599_627_370_496.0 {
        (x + SHIFT) - SHIFT
    } else {
        x.round_ties_even()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn clip_zero_grads_is_noop() {
        let mut p = vec![Tensor::zeros(&[3]).with_grad()];
        p[0].grad = Some(vec![0.0; 3]);
        assert_eq!(global_grad_norm_clip(&mut p, 1.0), 0.0);
        assert_eq!(p[0].grad.as_deref(), Some(&[0.0, 0.0, 0.0][..]));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut p = vec![Tensor::zeros(&[2]).with_grad()];
        p[0].grad = Some(vec![3.0, 4.0]);
        let norm = global_grad_norm_clip(&mut p, 2.5);
        assert_eq!(norm, 5.0);
        let g = p[0].grad.as_ref().unwrap();
        assert!((g[0] - 1.5).abs() < 1e-15 && (g[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn clip_below_threshold_unchanged() {
        let mut p = vec![Tensor::zeros(&[2]).with_grad(), Tensor::zeros(&[1])];
        p[0].grad = Some(vec![0.3, -0.4]);
        let norm = global_grad_norm_clip(&mut p, 500.0);
        assert!((norm - 0.5).abs() < 1e-15);
        assert_eq!(p[0].grad.as_deref(), Some(&[0.3, -0.4][..]));
    }

    #[test]
    fn clip_spans_all_params() {
        let mut p = vec![
            Tensor::zeros(&[1]).with_grad(),
            Tensor::zeros(&[1]).with_grad(),
        ];
        p[0].grad = Some(vec![6.0]);
        p[1].grad = Some(vec![8.0]);
        assert_eq!(global_grad_norm_clip(&mut p, 5.0), 10.0);
        assert!((p[0].grad.as_ref().unwrap()[0] - 3.0).abs() < 1e-15);
        assert!((p[1].grad.as_ref().unwrap()[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_even() {
        assert_eq!(round_half_even(2.5), 2.0);
        assert_eq!(round_half_even(3.5), 4.0);
        assert_eq!(round_half_even(-0.5), -0.0);
        assert_eq!(round_half_even(1.4), 1.0);
    }
}
