//! Dense row-major tensors with reverse-mode differentiation.
//!
//! Everything downstream (scan kernels, blocks, heads) is built from the
//! ops in this module. Values are `f32` for training and `f64` for
//! gradient-check builds; the [`Element`] trait abstracts over the two.

pub mod graph;
pub mod ops;
pub mod optim;

use std::fmt;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::Float;
use thiserror::Error;

pub use graph::{Gradients, Graph, Mode, ParamId, ParamStore, Var};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, GradAccum};

/// Scalar element type of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Float + num_traits::NumAssignOps + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for `T::from_f64` in numeric code.
#[inline]
pub fn c<T: Element>(v: f64) -> T {
    T::from_f64(v)
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),
    #[error("backward: graph already consumed")]
    GraphConsumed,
    #[error("optimizer: non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, details: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch { op, details: details.into() }
}

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

/// Dense row-major tensor. Data is shared (`Arc`) so clones are cheap;
/// the autodiff graph saves activations by cloning.
#[derive(Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(shape_err(
                "tensor::new",
                format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self { shape, data: Arc::new(vec![T::zero(); numel]) }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self { shape, data: Arc::new(vec![v; numel]) }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: Arc::new(vec![v]) }
    }

    /// Uniform sample in `[lo, hi)` from the given generator.
    pub fn rand_uniform(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| c::<T>(rng.random_range(lo..hi))).collect();
        Self { shape, data: Arc::new(data) }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies only if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(shape_err(op, format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(shape_err(op, format!("expected rank 3, got {:?}", self.shape))),
        }
    }

    /// Element at a full multi-index. Convenience for tests and decoding.
    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0usize;
        for (i, (&ix, &ext)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range {ext} at axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest relative difference against `other`, with the usual
    /// `max(1, |a|, |b|)` denominator guard.
    pub fn max_rel_err(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_rel_err shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| {
                let (a, b) = (a.to_f64(), b.to_f64());
                (a - b).abs() / a.abs().max(b.abs()).max(1.0)
            })
            .fold(0.0, f64::max)
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?} {:?}{}", self.shape, preview, if self.numel() > 8 { "…" } else { "" })
    }
}

/// Numerically safe softplus: `ln(1 + e^v)` without overflow for large `v`.
#[inline]
pub fn softplus<T: Element>(v: T) -> T {
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Numerically safe logistic sigmoid.
#[inline]
pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Element>(v: T) -> T {
    v * sigmoid(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn softplus_is_overflow_safe() {
        for &v in &[-80.0f64, -1.0, 0.0, 1.0, 80.0] {
            let s = softplus(v);
            assert!(s.is_finite(), "softplus({v}) not finite");
            assert!(s >= 0.0);
        }
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-12);
        // For large v, softplus(v) ~ v.
        assert!((softplus(80.0f64) - 80.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_analytic_points() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-80.0f64) >= 0.0 && sigmoid(80.0f64) <= 1.0);
        assert_eq!(silu(0.0f64), 0.0);
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::<f64>::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.at(&[0, 1]), 1.0);
    }
}
