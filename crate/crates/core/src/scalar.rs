//! Floating-point abstraction shared by every numeric module.
//!
//! All signal processing, network and loss code is written against
//! [`Scalar`], which is implemented for `f32` and `f64`. Training and the
//! gradient checks use `f64`; the crate root exposes `f64` aliases.

use ndarray::NdFloat;
use num_traits::{FromPrimitive, ToPrimitive};
use rustfft::FftNum;

/// Real scalar usable by the DSP, network and loss code.
pub trait Scalar: NdFloat + FftNum + FromPrimitive + ToPrimitive + Default {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant into the working scalar type.
#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 constant representable in scalar type")
}

/// Converts a count into the working scalar type.
#[inline]
pub fn count<T: Scalar>(n: usize) -> T {
    T::from_usize(n).expect("count representable in scalar type")
}

#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
