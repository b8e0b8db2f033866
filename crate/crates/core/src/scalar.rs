//! Generic scalar abstraction for the numeric core.
//!
//! Everything that does arithmetic (backbone, losses, optimizers, weight
//! updates) is generic over [`Scalar`] so the same code runs in `f64`
//! (the default precision), `f32` (opt-in for speed), or [`crate::dual::Dual`]
//! for forward-mode derivatives of the backward pass.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from `f64`; panics only for exotic scalar
    /// types that cannot represent ordinary constants.
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("scalar conversion from f64")
    }

    /// Projection to `f64` for reporting and serialization.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(value: f64) -> Self {
        value
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip() {
        assert_eq!(f64::of(0.25), 0.25);
        assert_eq!(0.25f64.as_f64(), 0.25);
        assert_eq!(f32::of(0.5), 0.5f32);
        assert_eq!(0.5f32.as_f64(), 0.5);
    }
}
