//! A small dense-tensor CNN engine: convolution, max pooling, ReLU, dense,
//! global average pooling and softmax, with exact reverse-mode gradients.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and `f64` for finite-difference checks.

mod model;
pub mod ops;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{Architecture, Gradients, LayerParams, LayerSpec, Model, ModelSpec, Trace};
pub use ops::{cross_entropy, softmax, CE_FLOOR};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    const PRECISION: Precision;

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;
}
