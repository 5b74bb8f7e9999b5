//! Scalar abstraction: the numerical core is generic over `f32`/`f64`.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar used throughout the toolkit.
///
/// Combines the nalgebra field operations needed for dense linear algebra
/// with the num-traits conversions needed for constants and I/O. Implemented
/// for `f32` and `f64`; the crate root exports `f64` aliases of the main
/// types, which is what the CLI and the experiment harness use.
pub trait Real:
    RealField
    + FromPrimitive
    + ToPrimitive
    + Copy
    + std::fmt::Display
    + std::fmt::LowerExp
    + serde::Serialize
    + serde::de::DeserializeOwned
{
    /// Convert a constant from `f64`.
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("constant representable in scalar type")
    }

    /// Lossy view as `f64`, for formatting and hashing.
    fn lossy_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// True for NaN or infinite values. `x - x` is zero exactly for finite x.
    fn is_bad(self) -> bool {
        !(self - self == Self::zero())
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Elementwise clamp onto a closed interval.
pub fn clamp<F: Real>(x: F, lo: F, hi: F) -> F {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

pub fn fmax<F: Real>(a: F, b: F) -> F {
    if a < b {
        b
    } else {
        a
    }
}

pub fn fmin<F: Real>(a: F, b: F) -> F {
    if b < a {
        b
    } else {
        a
    }
}
