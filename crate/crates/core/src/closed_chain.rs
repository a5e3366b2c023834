//! One-DoF four-link closed chain driven by a linear actuator.
//!
//! The triangle has its vertices at the driven pivot (inner angle `q`), the
//! actuator base `Σ_Bc` (inner angle `q1`) and the rod attachment `Σ_Tc` (inner
//! angle `q2`). Side `L` joins pivot and actuator base, side `L1` joins pivot
//! and rod attachment, and the actuator spans `x + x0` with `x0 = Lc + Lc0`.
//! All inner angles live on the negative branch `(-π, 0)` and sum to `-π`.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planar::PlanarPose;
use crate::scalar::{wrap_angle, Real};

/// Slack tolerated on arccos arguments before declaring the triangle infeasible.
pub const ACOS_SLACK: f64 = 1e-12;

/// Inner angles closer than this to `0` or `-π` are treated as singular.
pub const SINGULARITY_EPS: f64 = 1e-6;

/// Where the chain is attached, as directions seen from the driven pivot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mounting<T> {
    /// Direction of the actuator base, in the parent (pivot) frame.
    pub base_angle: T,
    /// Direction of the rod attachment, in the driven link's frame.
    pub rod_angle: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct ClosedChainParams<T> {
    #[serde(rename = "L")]
    pub l: T,
    #[serde(rename = "L1")]
    pub l1: T,
    #[serde(rename = "Lc")]
    pub lc: T,
    #[serde(rename = "Lc0")]
    pub lc0: T,
    pub psi: T,
    pub psi1: T,
    pub psi2: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mounting: Option<Mounting<T>>,
}

/// `(q, q1, q2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerAngles<T> {
    pub q: T,
    pub q1: T,
    pub q2: T,
}

impl<T: Real> InnerAngles<T> {
    pub fn as_array(&self) -> [T; 3] {
        [self.q, self.q1, self.q2]
    }

    /// `q + q1 + q2 + π`, zero for a closed triangle.
    pub fn triangle_residual(&self) -> T {
        self.q + self.q1 + self.q2 + T::pi()
    }
}

impl<T: Real> ClosedChainParams<T> {
    /// Builds the parameters from link lengths and mounting directions; the
    /// offsets follow from the mounting.
    pub fn from_mounting(l: T, l1: T, lc: T, lc0: T, mounting: Mounting<T>) -> Self {
        let mut p = Self {
            l,
            l1,
            lc,
            lc0,
            psi: T::zero(),
            psi1: T::zero(),
            psi2: T::zero(),
            mounting: Some(mounting),
        };
        p.refresh_offsets();
        p
    }

    /// Recomputes `ψ, ψ1, ψ2` from the mounting directions when present.
    pub fn refresh_offsets(&mut self) {
        if let Some(m) = self.mounting {
            self.psi = wrap_angle(m.base_angle - m.rod_angle);
            self.psi1 = wrap_angle(-(m.base_angle + T::pi()));
            self.psi2 = wrap_angle(m.rod_angle);
        }
    }

    /// Mounting directions, defaulting to a rod on the link axis.
    pub fn mounting_or_default(&self) -> Mounting<T> {
        self.mounting.unwrap_or(Mounting {
            base_angle: self.psi,
            rod_angle: T::zero(),
        })
    }

    pub fn x0(&self) -> T {
        self.lc + self.lc0
    }

    /// Pin-to-pin actuator length at stroke `x`.
    pub fn actuator_length(&self, x: T) -> T {
        x + self.x0()
    }

    /// Optimized lengths `[L, Lc0, Lc]`.
    pub fn xi(&self) -> [T; 3] {
        [self.l, self.lc0, self.lc]
    }

    pub fn with_xi(&self, xi: [T; 3]) -> Self {
        Self {
            l: xi[0],
            lc0: xi[1],
            lc: xi[2],
            ..*self
        }
    }

    /// Positive lengths and strict triangle inequalities over the whole stroke.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("L", self.l), ("L1", self.l1), ("Lc", self.lc), ("Lc0", self.lc0)] {
            if !(v > T::zero()) || !v.is_finite_val() {
                return Err(Error::Configuration(format!(
                    "closed chain length {name} = {} must be > 0 (21g)",
                    v.as_f64()
                )));
            }
        }
        let shortest = self.x0();
        let longest = self.x0() + self.lc;
        if !((self.l - self.l1).abs() < shortest) {
            return Err(Error::GeometryInfeasible(format!(
                "|L - L1| = {} must be below the retracted length {}",
                (self.l - self.l1).abs().as_f64(),
                shortest.as_f64()
            )));
        }
        if !(longest < self.l + self.l1) {
            return Err(Error::GeometryInfeasible(format!(
                "extended length {} must be below L + L1 = {}",
                longest.as_f64(),
                (self.l + self.l1).as_f64()
            )));
        }
        Ok(())
    }

    fn check_stroke(&self, x: T) -> Result<()> {
        if !(x >= T::zero() && x <= self.lc) {
            return Err(Error::StrokeLimit {
                value: x.as_f64(),
                limit: self.lc.as_f64(),
            });
        }
        Ok(())
    }
}

fn neg_acos<T: Real>(arg: T, what: &str) -> Result<T> {
    let slack = T::lit(ACOS_SLACK);
    let one = T::one();
    if !arg.is_finite_val() || arg > one + slack || arg < -one - slack {
        return Err(Error::GeometryInfeasible(format!(
            "{what}: arccos argument {} outside [-1, 1]",
            arg.as_f64()
        )));
    }
    Ok(-(arg.max(-one).min(one)).acos())
}

/// Inner angles for actuator length `s = x + x0`, without any stroke check.
pub fn inner_angles_at_length<T: Real>(params: &ClosedChainParams<T>, s: T) -> Result<InnerAngles<T>> {
    let (l, l1) = (params.l, params.l1);
    let two = T::lit(2.0);
    let q = neg_acos((s * s - l * l - l1 * l1) / (-two * l * l1), "q")?;
    let q1 = neg_acos((l1 * l1 - s * s - l * l) / (-two * s * l), "q1")?;
    let q2 = neg_acos((l * l - s * s - l1 * l1) / (-two * s * l1), "q2")?;
    Ok(InnerAngles { q, q1, q2 })
}

/// Inner angles of the triangle for actuator stroke `x ∈ [0, Lc]`.
pub fn inner_angles<T: Real>(params: &ClosedChainParams<T>, x: T) -> Result<InnerAngles<T>> {
    params.check_stroke(x)?;
    inner_angles_at_length(params, params.actuator_length(x))
}

/// Actuator length from the inner angle at the pivot (law of cosines).
pub fn length_from_inner_angle<T: Real>(params: &ClosedChainParams<T>, q: T) -> T {
    let (l, l1) = (params.l, params.l1);
    (l * l + l1 * l1 - T::lit(2.0) * l * l1 * q.cos()).sqrt()
}

/// Stroke `x` that places the driven joint at `θ`.
pub fn actuator_from_angle<T: Real>(params: &ClosedChainParams<T>, theta: T) -> Result<T> {
    let q = wrap_angle(theta - params.psi);
    if !(q > -T::pi() && q < T::zero()) {
        return Err(Error::GeometryInfeasible(format!(
            "inner angle q = {} outside (-pi, 0)",
            q.as_f64()
        )));
    }
    let x = length_from_inner_angle(params, q) - params.x0();
    params.check_stroke(x)?;
    Ok(x)
}

fn guard_singular<T: Real>(angles: &InnerAngles<T>) -> Result<()> {
    let eps = T::lit(SINGULARITY_EPS);
    for (name, a) in [("q", angles.q), ("q1", angles.q1), ("q2", angles.q2)] {
        if !(a < -eps && a > -T::pi() + eps) {
            return Err(Error::NearSingular(format!(
                "{name} = {} within {SINGULARITY_EPS} rad of a degenerate triangle",
                a.as_f64()
            )));
        }
    }
    Ok(())
}

/// `dq/dx` for the three inner angles at actuator length `s`.
fn k_from_angles<T: Real>(params: &ClosedChainParams<T>, s: T, a: &InnerAngles<T>) -> [T; 3] {
    let (l, l1) = (params.l, params.l1);
    [
        s / (l * l1 * a.q.sin()),
        -(s - l * a.q1.cos()) / (s * l * a.q1.sin()),
        -(s - l1 * a.q2.cos()) / (s * l1 * a.q2.sin()),
    ]
}

/// Time derivatives of the k-coefficients for actuator rate `x_dot`.
fn k_dot_from_angles<T: Real>(params: &ClosedChainParams<T>, s: T, a: &InnerAngles<T>, k: &[T; 3], x_dot: T) -> [T; 3] {
    let (l, l1) = (params.l, params.l1);
    let (sq, cq) = a.q.sin_cos();
    let q_dot = k[0] * x_dot;
    let k1_dot = (x_dot * sq - s * cq * q_dot) / (l * l1 * sq * sq);

    let side = |len: T, ang: T, k_i: T| {
        let (sa, ca) = ang.sin_cos();
        let ang_dot = k_i * x_dot;
        let num = s - len * ca;
        let den = s * len * sa;
        let num_dot = x_dot + len * sa * ang_dot;
        let den_dot = len * (x_dot * sa + s * ca * ang_dot);
        -(num_dot * den - num * den_dot) / (den * den)
    };
    [k1_dot, side(l, a.q1, k[1]), side(l1, a.q2, k[2])]
}

/// Holonomic velocity coefficients `(k1, k2, k3)`, i.e. `d(q, q1, q2)/dx`.
pub fn k_coefficients<T: Real>(params: &ClosedChainParams<T>, x: T) -> Result<[T; 3]> {
    let a = inner_angles(params, x)?;
    guard_singular(&a)?;
    Ok(k_from_angles(params, params.actuator_length(x), &a))
}

/// Inner-angle rates; passive joint rates are identical.
pub fn chain_rates<T: Real>(params: &ClosedChainParams<T>, x: T, x_dot: T) -> Result<[T; 3]> {
    let k = k_coefficients(params, x)?;
    Ok(k.map(|ki| ki * x_dot))
}

/// Inner-angle accelerations `k̇ ẋ + k ẍ`; passive joint accelerations are identical.
pub fn chain_accelerations<T: Real>(params: &ClosedChainParams<T>, x: T, x_dot: T, x_ddot: T) -> Result<[T; 3]> {
    let a = inner_angles(params, x)?;
    guard_singular(&a)?;
    let s = params.actuator_length(x);
    let k = k_from_angles(params, s, &a);
    let kd = k_dot_from_angles(params, s, &a, &k, x_dot);
    Ok([0, 1, 2].map(|i| kd[i] * x_dot + k[i] * x_ddot))
}

/// Full kinematic state of one loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainState<T> {
    pub x: T,
    pub x_dot: T,
    pub x_ddot: T,
    /// Inner angles.
    pub angles: InnerAngles<T>,
    pub rates: [T; 3],
    pub accels: [T; 3],
    /// Passive joint angles `(θ, θ1, θ2)`; their rates equal `rates`.
    pub theta: [T; 3],
    pub k: [T; 3],
    pub k_dot: [T; 3],
}

impl<T: Real> ChainState<T> {
    /// State from the actuator side. Requires `x ∈ [0, Lc]`.
    pub fn from_actuator(params: &ClosedChainParams<T>, x: T, x_dot: T, x_ddot: T) -> Result<Self> {
        let angles = inner_angles(params, x)?;
        Self::assemble(params, x, angles, x_dot, x_ddot)
    }

    /// State from the driven joint angle and its derivatives. The stroke is not
    /// limit-checked, so callers can evaluate slightly infeasible designs.
    pub fn from_joint(params: &ClosedChainParams<T>, theta: T, theta_dot: T, theta_ddot: T) -> Result<Self> {
        let q = wrap_angle(theta - params.psi);
        let eps = T::lit(SINGULARITY_EPS);
        if !(q < -eps && q > -T::pi() + eps) {
            return Err(Error::NearSingular(format!(
                "q = theta - psi = {} outside (-pi, 0)",
                q.as_f64()
            )));
        }
        let s = length_from_inner_angle(params, q);
        let mut angles = inner_angles_at_length(params, s)?;
        angles.q = q;
        guard_singular(&angles)?;
        let k = k_from_angles(params, s, &angles);
        let x_dot = theta_dot / k[0];
        let k_dot = k_dot_from_angles(params, s, &angles, &k, x_dot);
        let x_ddot = (theta_ddot - k_dot[0] * x_dot) / k[0];
        Ok(Self::finish(params, s - params.x0(), x_dot, x_ddot, angles, k, k_dot))
    }

    fn assemble(params: &ClosedChainParams<T>, x: T, angles: InnerAngles<T>, x_dot: T, x_ddot: T) -> Result<Self> {
        guard_singular(&angles)?;
        let s = params.actuator_length(x);
        let k = k_from_angles(params, s, &angles);
        let k_dot = k_dot_from_angles(params, s, &angles, &k, x_dot);
        Ok(Self::finish(params, x, x_dot, x_ddot, angles, k, k_dot))
    }

    fn finish(
        params: &ClosedChainParams<T>,
        x: T,
        x_dot: T,
        x_ddot: T,
        angles: InnerAngles<T>,
        k: [T; 3],
        k_dot: [T; 3],
    ) -> Self {
        let rates = k.map(|ki| ki * x_dot);
        let accels = [0, 1, 2].map(|i| k_dot[i] * x_dot + k[i] * x_ddot);
        Self {
            x,
            x_dot,
            x_ddot,
            angles,
            rates,
            accels,
            theta: [angles.q + params.psi, angles.q1 + params.psi1, angles.q2 + params.psi2],
            k,
            k_dot,
        }
    }
}

/// Pose of `Σ_T1` reached through the pivot side (`θ`), relative to `Σ_Bc`.
pub fn upper_chain_end<T: Real>(params: &ClosedChainParams<T>, theta: T) -> PlanarPose<T> {
    let q = theta - params.psi;
    PlanarPose::translation(params.l, T::zero())
        .compose(&PlanarPose::rotation(T::pi() + q))
        .compose(&PlanarPose::translation(params.l1, T::zero()))
}

/// Pose of `Σ_T2` reached through the actuator (`θ1`, `x`, `θ2`), relative to `Σ_Bc`.
pub fn lower_chain_end<T: Real>(params: &ClosedChainParams<T>, theta1: T, x: T, theta2: T) -> PlanarPose<T> {
    let q1 = theta1 - params.psi1;
    let q2 = theta2 - params.psi2;
    PlanarPose::rotation(-q1)
        .compose(&PlanarPose::translation(params.actuator_length(x), T::zero()))
        .compose(&PlanarPose::rotation(-q2))
}

/// `(Δx, Δz, Δangle)` between the two chain ends, expressed in the base frame.
/// `base` places `Σ_Bc` in the world; the residual does not depend on it.
pub fn loop_closure_residual<T: Real>(
    params: &ClosedChainParams<T>,
    base: &PlanarPose<T>,
    theta: T,
    theta1: T,
    x: T,
    theta2: T,
) -> Vector3<T> {
    let upper = base.compose(&upper_chain_end(params, theta));
    let lower = base.compose(&lower_chain_end(params, theta1, x, theta2));
    let d: Vector2<T> = crate::planar::rotate(-base.orientation, &(upper.position - lower.position));
    Vector3::new(d.x, d.y, wrap_angle(upper.orientation - lower.orientation))
}

impl<T: Real> ChainState<T> {
    pub fn closure_residual(&self, params: &ClosedChainParams<T>) -> Vector3<T> {
        loop_closure_residual(
            params,
            &PlanarPose::identity(),
            self.theta[0],
            self.theta[1],
            self.x,
            self.theta[2],
        )
    }
}
