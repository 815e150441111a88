//! Dense row-major tensors with reverse-mode gradients.
//!
//! The compute layer underneath everything else: frames, feature maps,
//! attention masks and projections are all `Tensor`s. Training records
//! operations on a [`Tape`] and differentiates with [`Tape::backward`];
//! [`gradcheck`] verifies every registered operation against central
//! finite differences in `f64`.

mod ema;
mod gradcheck;
mod io;
mod kernels;
mod opsuite;
mod tape;

pub use ema::{ema_update, ema_update_named};
pub use gradcheck::{
    grad_check, grad_check_sampled, GradCheckFailure, GradCheckOptions, GradCheckReport, ParamSpec,
};
pub use io::{read_tensor, read_tensor_f32, write_tensor, DtypeTag};
pub use opsuite::{check_all_ops, OpCheck};
pub use tape::{Gradients, Tape, ValueId};

use std::fmt;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("element count {count} does not match shape {shape:?}")]
    CountMismatch { count: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
    #[error("parameter structure mismatch: {detail}")]
    StructureMismatch { detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: no admissible random sample after {tries} tries")]
    SampleExhausted { op: &'static str, tries: usize },
    #[error("tensor file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad tensor file {path}: {detail}")]
    BadFile { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Element type of a tensor. Training runs in `f32`; gradient checking in `f64`.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Copy + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: DtypeTag;

    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DtypeTag = DtypeTag::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DtypeTag = DtypeTag::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Immutable dense array, row-major, cheap to clone.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Scalar = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::CountMismatch {
                count: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![E::zero(); numel]),
        }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new((0..numel).map(|i| f(i)).collect()),
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

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::CountMismatch {
                count: self.numel(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .map(|v| F::from_f64c(v.to_f64().expect("finite")))
                    .collect(),
            ),
        }
    }

    /// Replace one element, returning a fresh tensor (used by the gradient checker).
    pub fn with_element(&self, index: usize, value: E) -> Self {
        let mut data = self.data.as_ref().clone();
        data[index] = value;
        Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }
}

pub(crate) fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(TensorError::BadRank {
            op,
            expected: rank,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_mismatch_rejected() {
        let err = Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::CountMismatch { .. }));
    }

    #[test]
    fn reshape_shares_data() {
        let t = Tensor::<f32>::new(&[2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
    }
}
