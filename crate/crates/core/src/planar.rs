//! Rigid transforms in the X-Z plane. Angles are counter-clockwise with X to the
//! right and Z up.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::scalar::{wrap_angle, Real};

/// Position and orientation in the X-Z plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarPose<T: Real> {
    pub position: Vector2<T>,
    pub orientation: T,
}

impl<T: Real> PlanarPose<T> {
    pub fn identity() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn new(x: T, z: T, orientation: T) -> Self {
        Self {
            position: Vector2::new(x, z),
            orientation,
        }
    }

    pub fn translation(x: T, z: T) -> Self {
        Self::new(x, z, T::zero())
    }

    pub fn rotation(angle: T) -> Self {
        Self::new(T::zero(), T::zero(), angle)
    }

    /// `self ∘ other`: `other` expressed in `self`'s frame.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            position: self.position + rotate(self.orientation, &other.position),
            orientation: self.orientation + other.orientation,
        }
    }

    pub fn inverse(&self) -> Self {
        Self {
            position: -rotate(-self.orientation, &self.position),
            orientation: -self.orientation,
        }
    }

    pub fn transform_point(&self, p: &Vector2<T>) -> Vector2<T> {
        self.position + rotate(self.orientation, p)
    }

    /// Same pose with orientation wrapped to `(-pi, pi]`.
    pub fn wrapped(&self) -> Self {
        Self {
            position: self.position,
            orientation: wrap_angle(self.orientation),
        }
    }
}

pub fn rotate<T: Real>(angle: T, v: &Vector2<T>) -> Vector2<T> {
    let (s, c) = angle.sin_cos();
    Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Unit vector at `angle`.
pub fn unit<T: Real>(angle: T) -> Vector2<T> {
    let (s, c) = angle.sin_cos();
    Vector2::new(c, s)
}

/// `ω ŷ × r` for an in-plane vector, i.e. `r` rotated by +90° and scaled.
pub fn perp<T: Real>(omega: T, r: &Vector2<T>) -> Vector2<T> {
    Vector2::new(-omega * r.y, omega * r.x)
}

/// Scalar planar cross product `a × b`.
pub fn cross<T: Real>(a: &Vector2<T>, b: &Vector2<T>) -> T {
    a.x * b.y - a.y * b.x
}
