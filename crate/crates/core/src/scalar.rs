//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar used for probabilities, values and bonuses.
///
/// Implemented for `f32` and `f64`. Tolerances are part of the trait because a row-sum check
/// at `1e-12` is meaningful in double precision but not in single precision.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Tolerance for stochastic-row and distribution sums.
    const ROW_TOL: f64;
    /// Tolerance for comparing exact dynamic-programming results.
    const DP_TOL: f64;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    const ROW_TOL: f64 = 1e-12;
    const DP_TOL: f64 = 1e-9;
}

impl Scalar for f32 {
    const ROW_TOL: f64 = 1e-5;
    const DP_TOL: f64 = 1e-4;
}

/// Index of the largest entry, ties broken toward the smallest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn max_of<T: Scalar>(values: &[T]) -> T {
    values.iter().copied().fold(T::neg_infinity(), T::max)
}
