//! Layers with hand-written forward and backward passes, plus the Adam
//! optimizer.
//!
//! Every layer is generic over [`Real`] so that the same code path trains in
//! `f32` and is gradient-checked in `f64`. Activations flow between layers as
//! padded [`Batch`]es; a layer only ever reads the valid frames of an
//! example and writes zeros into its padding, so padding never leaks into
//! results.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};
use thiserror::Error;

pub mod adam;
pub mod aggregate;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod lstm;
pub mod pool;
pub mod relu;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use aggregate::TemporalMean;
pub use batchnorm::BatchNorm;
pub use conv::Conv2d;
pub use dense::Dense;
pub use dropout::Dropout;
pub use loss::{softmax, weighted_cross_entropy, weighted_cross_entropy_batch};
pub use lstm::{BiLstm, LstmDirection};
pub use pool::MaxPool2x2;
pub use relu::Relu;
pub use tensor::{Batch, BatchMask, Tensor};

/// Floating-point scalar used by all layers.
pub trait Real:
    Float
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`/`dgemm`: every addressed
    /// element of `a`, `b` and `c` must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Converts an `f64` constant into `T`.
#[inline]
pub fn cst<T: Real>(x: f64) -> T {
    <T as NumCast>::from(x).expect("finite constant")
}

#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Error, PartialEq)]
pub enum ComputeError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("batch norm saw no valid elements")]
    NoValidElements,
    #[error("sequence has no valid frames")]
    EmptySequence,
}

pub type Result<T> = std::result::Result<T, ComputeError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> ComputeError {
    ComputeError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Weight,
    /// Persistent state that is saved with the model but not optimized
    /// (batch-norm running statistics).
    Buffer,
}

/// A named parameter tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub kind: ParamKind,
    pub frozen: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape/value mismatch");
        let grad = vec![T::zero(); value.len()];
        Param {
            name: name.into(),
            shape,
            value,
            grad,
            kind: ParamKind::Weight,
            frozen: false,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        Param {
            kind: ParamKind::Buffer,
            ..Param::new(name, shape, value)
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param::new(name, shape, vec![T::zero(); n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Weight && !self.frozen
    }

    /// Prefixes the name, used when nesting layers.
    pub fn rename(&mut self, prefix: &str) {
        self.name = format!("{prefix}.{}", self.name);
    }
}
