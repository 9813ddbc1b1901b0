//! Scalar abstraction for the numeric kernels.
//!
//! Math kernels (composition, sparsification, densities, similarity) are
//! written against [`Scalar`] so the same code runs at `f32` tensor
//! precision and `f64` search precision. The byte-level container format is
//! deliberately *not* generic: encoding and decoding are defined per
//! [`crate::tensor::DType`].

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable in every numeric kernel of this crate.
///
/// This is a trait alias: any type with the listed bounds (in practice `f32`
/// and `f64`) picks up the implementation for free.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Copy + Send + Sync + Debug + Display + 'static
{
    /// Lossy conversion from `f64`, saturating at the type's range.
    fn from_f64_lossy(value: f64) -> Self {
        Self::from_f64(value).unwrap_or_else(|| {
            if value.is_nan() {
                Self::nan()
            } else if value > 0.0 {
                Self::infinity()
            } else {
                Self::neg_infinity()
            }
        })
    }

    /// Widening conversion to `f64` (exact for `f32` and `f64`).
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + Copy
        + Send
        + Sync
        + Debug
        + Display
        + 'static
{
}
