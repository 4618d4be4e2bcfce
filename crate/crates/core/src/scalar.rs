//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar usable for intensities, displacements and losses.
pub trait Real: Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into `T`.
#[inline(always)]
pub fn lit<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("literal representable")
}

/// Converts a count into `T`.
#[inline(always)]
pub fn count<T: Real>(n: usize) -> T {
    T::from_usize(n).expect("count representable")
}

#[inline(always)]
pub fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Sequential left-to-right sum. Used wherever a reduction must be
/// bit-reproducible regardless of thread count.
pub fn ordered_sum<T: Real>(values: impl IntoIterator<Item = T>) -> T {
    let mut acc = T::zero();
    for v in values {
        acc += v;
    }
    acc
}
