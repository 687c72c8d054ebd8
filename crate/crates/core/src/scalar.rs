//! Scalar abstraction over the element types tensors may hold.
//!
//! Training runs in `f32`; gradient verification runs in `f64`, where central
//! finite differences are numerically trustworthy. Everything downstream is
//! generic over [`Scalar`] so both precisions share one implementation.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Element type of a [`crate::Tensor`]: a float with conversions and
/// assignment operators.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Default + 'static
{
    /// Lossy conversion from `f64`, for literals and RNG draws.
    fn from_f(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 not representable")
    }

    /// Widening conversion to `f64`, for reporting and score arithmetic.
    fn to_f(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
