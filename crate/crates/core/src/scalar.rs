//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the engine is generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short name written into checkpoints.
    const NAME: &'static str;

    /// Lossless for `f64`, rounding for `f32`.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion from f64")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar is representable as f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}
