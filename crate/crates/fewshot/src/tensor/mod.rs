//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the plain value type used everywhere in the crate. Gradient
//! computation goes through a [`Tape`]: operations are recorded as they run
//! and [`Tape::backward`] replays them in reverse. A tape is single-threaded;
//! independent tapes may run on separate threads.

mod checkpoint;
mod gradcheck;
mod kernels;
mod sgd;
mod tape;

pub use checkpoint::{load_tensors, save_tensors, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use checkpoint::{
    decode_tensors as decode_tensors_bytes, encode_tensors as encode_tensors_bytes,
};
pub use gradcheck::grad_check;
pub use sgd::SgdOptimizer;
pub use tape::{Tape, Var};

pub(crate) use kernels::strides_for;

use thiserror::Error;

/// Numerical-stability constant used inside every standard-deviation
/// computation (`sigma = sqrt(var + STD_EPS)`).
pub const STD_EPS: f64 = 1e-5;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    InvalidShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?} (product {numel})")]
    LengthMismatch {
        shape: Vec<usize>,
        len: usize,
        numel: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: zero-norm row {row}")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },
    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,
    #[error("{op}: parameter out of range: {detail}")]
    BadParameter { op: &'static str, detail: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
}

/// N-dimensional array of f64 in row-major order.
///
/// Values are immutable after creation; every constructor rejects non-finite
/// entries. `grad` is populated only on tensors extracted from a tape after
/// `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
                numel,
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
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

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(vec![], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Single stored value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    /// Value at a multi-dimensional index.
    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let strides = strides_for(&self.shape);
        let flat: usize = index
            .iter()
            .zip(&strides)
            .map(|(i, s)| {
                assert!(*i < usize::MAX);
                i * s
            })
            .sum();
        self.data[flat]
    }

    /// Elementwise map into a new tensor. Panics if `f` produces a
    /// non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        assert!(
            data.iter().all(|v| v.is_finite()),
            "Tensor::map produced a non-finite value"
        );
        Self {
            shape: self.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Flat copy of the data reshaped to `shape` (same element count).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { .. }));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(4.25);
        assert!(t.is_scalar());
        assert_eq!(t.item(), 4.25);
        assert_eq!(t.rank(), 0);
    }

    #[test]
    fn get_indexes_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.get(&[0, 0]), 0.0);
        assert_eq!(t.get(&[0, 2]), 2.0);
        assert_eq!(t.get(&[1, 0]), 3.0);
        assert_eq!(t.get(&[1, 2]), 5.0);
    }
}
