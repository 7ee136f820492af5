use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::Float;

/// Floating-point element type for the engine.
///
/// Training and inference run at `f32`; gradient verification runs the
/// identical code at `f64` where finite differences are trustworthy.
pub trait Scalar:
    Float + Debug + Display + Default + Sum + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn from_usize(v: usize) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn from_usize(v: usize) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn from_usize(v: usize) -> Self {
        v as f64
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
