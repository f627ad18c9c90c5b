//! Scalar abstraction shared by every module.
//!
//! All geometry, rasterization and alignment code is written against [`Real`],
//! implemented for `f32` and `f64`.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + Send + Sync + 'static
{
    /// Quiet NaN, used as the invalid/background sentinel.
    const NAN: Self;
    const INFINITY: Self;

    /// Converts an `f64` literal. Lossy for `f32`.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn is_nan_value(self) -> bool;
}

impl Real for f32 {
    const NAN: Self = f32::NAN;
    const INFINITY: Self = f32::INFINITY;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn is_nan_value(self) -> bool {
        self.is_nan()
    }
}

impl Real for f64 {
    const NAN: Self = f64::NAN;
    const INFINITY: Self = f64::INFINITY;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn is_nan_value(self) -> bool {
        self.is_nan()
    }
}
