//! Scalar abstraction over the two supported precisions.
//!
//! Every kernel in this crate is generic over [`Scalar`]: `f32` is the
//! runtime precision, `f64` the verification precision used by the gradient
//! checker. Concrete aliases (`Tensor32`, `Tensor64`, ...) live at the crate
//! root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};

/// Floating-point element type of all tensors.
pub trait Scalar:
    Float + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Conversion from `f64`, used for constants and hyperparameters.
    fn from_f64(x: f64) -> Self;

    /// Widening (or identity) conversion used by reports and accumulators.
    /// Named to avoid clashing with `num_traits::ToPrimitive::to_f64`.
    fn as_f64(self) -> f64;

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}
