//! Scalar abstraction shared by the kinematic, dynamic and drivetrain models.
//!
//! Everything that does geometry or physics is written against [`Real`], so the
//! same code runs in `f64` (the default, used by the optimizer) and `f32`.

use nalgebra::RealField;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the models: `f32` or `f64`.
pub trait Real: RealField + Copy + FloatConst + FromPrimitive + ToPrimitive {
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        nalgebra::convert(v)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn is_finite_val(self) -> bool {
        self.as_f64().is_finite()
    }

    /// -1, 0 or 1; zero maps to zero (used by the Coulomb friction term).
    #[inline]
    fn signum0(self) -> Self {
        if self > Self::zero() {
            Self::one()
        } else if self < Self::zero() {
            -Self::one()
        } else {
            Self::zero()
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle<T: Real>(angle: T) -> T {
    let two_pi = T::two_pi();
    let mut a = angle % two_pi;
    if a <= -T::pi() {
        a += two_pi;
    } else if a > T::pi() {
        a -= two_pi;
    }
    a
}
