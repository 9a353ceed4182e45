//! Scalar abstraction: everything numerical in the simulator is generic over
//! `Real`, which is implemented for `f32` and `f64`.

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;
use std::fmt::{Debug, Display, LowerExp};

pub trait Real:
    'static
    + Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + FftNum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    /// Machine epsilon scaled for "roughly exact" comparisons.
    fn tiny() -> Self;
}

impl Real for f32 {
    fn tiny() -> Self {
        1e-5
    }
}

impl Real for f64 {
    fn tiny() -> Self {
        1e-12
    }
}

/// Convenience for writing constants as `2.0.r()` in generic code.
pub trait AsReal<T> {
    fn r(self) -> T;
}

impl<T: Real> AsReal<T> for f64 {
    #[inline]
    fn r(self) -> T {
        T::c(self)
    }
}

impl<T: Real> AsReal<T> for usize {
    #[inline]
    fn r(self) -> T {
        T::from_usize_lossy(self)
    }
}
