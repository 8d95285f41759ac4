//! Scalar abstraction shared by the model, loss and optimizer.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar the estimator is generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Largest exponent the loss evaluates before reporting overflow.
    fn exp_limit() -> Self;

    /// Unit roundoff.
    fn unit_roundoff() -> Self {
        Self::epsilon()
    }

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_usize_exact(v: usize) -> Self {
        Self::from_usize(v).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    fn exp_limit() -> Self {
        700.0
    }
}

impl Scalar for f32 {
    fn exp_limit() -> Self {
        // ln(f32::MAX) is about 88.7
        87.0
    }
}
