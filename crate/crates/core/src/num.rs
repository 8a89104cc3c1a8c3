//! Scalar abstraction shared by the closed-form math (statics, cable, actuator
//! conversions, control laws).

use nalgebra as na;
use num_traits as nt;

/// Floating point type usable by the generic math in this crate.
///
/// Math functions come from [`na::RealField`]; conversions come from
/// `num-traits`.
pub trait Scalar: na::RealField + Copy + nt::FromPrimitive + nt::ToPrimitive + Default + 'static {
    /// Converts an `f64` literal into the scalar type.
    fn lit(value: f64) -> Self {
        <Self as nt::FromPrimitive>::from_f64(value).expect("literal representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        nt::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Clamps `x` into `[lo, hi]`.
pub fn clamp<T: Scalar>(x: T, lo: T, hi: T) -> T {
    lo.max(x.min(hi))
}
