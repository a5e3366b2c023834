//! Planar rigid-body model of a serial backbone whose revolute joints are each
//! driven through a closed chain, plus prismatic telescope joints.
//!
//! Inverse dynamics uses Kane's form of Newton–Euler: every body's inertial
//! wrench is projected onto the partial velocities of the independent joint
//! coordinates, then each joint torque is mapped to its actuator by virtual work.

use nalgebra::{DMatrix, DVector, Matrix3xX, Vector2};
use serde::{Deserialize, Serialize};

use crate::closed_chain::{inner_angles_at_length, ChainState, ClosedChainParams};
use crate::error::{Error, Result};
use crate::planar::{perp, rotate, unit, PlanarPose};
use crate::scalar::Real;

/// Slack allowed on joint limits before a pose request is rejected.
pub const LIMIT_SLACK: f64 = 1e-9;

/// Rigid body attached to a link (or to a loop member) frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBody<T: Real> {
    pub mass: T,
    /// COM in the body frame.
    pub com_offset: Vector2<T>,
    pub inertia_about_com: T,
    pub length: T,
}

impl<T: Real> LinkBody<T> {
    /// Uniform slender rod along the frame's X axis.
    pub fn slender_rod(mass: T, length: T) -> Self {
        Self {
            mass,
            com_offset: Vector2::new(length / T::lit(2.0), T::zero()),
            inertia_about_com: mass * length * length / T::lit(12.0),
            length,
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.mass > T::zero()) || !self.mass.is_finite_val() {
            return Err(Error::Configuration(format!("{what}: mass must be > 0")));
        }
        if !(self.inertia_about_com >= T::zero()) || !self.inertia_about_com.is_finite_val() {
            return Err(Error::Configuration(format!("{what}: inertia must be >= 0")));
        }
        if !(self.length >= T::zero()) || !self.com_offset.iter().all(|v| v.is_finite_val()) {
            return Err(Error::Configuration(format!("{what}: length and COM must be finite")));
        }
        Ok(())
    }

    fn scaled(&self, ratio: T) -> Self {
        Self {
            mass: self.mass * ratio,
            com_offset: self.com_offset * ratio,
            inertia_about_com: self.inertia_about_com * ratio * ratio * ratio,
            length: self.length * ratio,
        }
    }
}

/// What a joint contributes to the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub enum JointKind<T: Real> {
    /// Revolute joint driven by an actuator through a closed chain. The barrel
    /// frame sits at the actuator base with X toward the rod attachment; the rod
    /// frame sits at the rod attachment with the same orientation.
    ClosedChain {
        closed_chain: ClosedChainParams<T>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        barrel: Option<LinkBody<T>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rod: Option<LinkBody<T>>,
        /// When set, barrel and rod bodies are given for this stroke and scale
        /// with `Lc` (mass and COM linearly, inertia cubically).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference_stroke: Option<T>,
    },
    /// Prismatic joint translating along `axis` (parent frame).
    PrismaticTelescope {
        axis: Vector2<T>,
    },
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct Joint<T: Real> {
    #[serde(default)]
    pub name: String,
    #[serde(flatten)]
    pub kind: JointKind<T>,
    /// Joint location in the parent frame; defaults to the parent's tip `(length, 0)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Vector2<T>>,
    /// Fixed rotation between the parent frame and the joint frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_angle: Option<T>,
    /// Index into the EMLA list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actuator: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<[T; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit: Option<T>,
    /// Body of the child link.
    pub link: LinkBody<T>,
}

impl<T: Real> Joint<T> {
    pub fn is_actuated(&self) -> bool {
        !matches!(self.kind, JointKind::Fixed)
    }

    pub fn chain(&self) -> Option<&ClosedChainParams<T>> {
        match &self.kind {
            JointKind::ClosedChain { closed_chain, .. } => Some(closed_chain),
            _ => None,
        }
    }

    fn loop_bodies(&self) -> (Option<LinkBody<T>>, Option<LinkBody<T>>) {
        match &self.kind {
            JointKind::ClosedChain {
                closed_chain,
                barrel,
                rod,
                reference_stroke,
            } => match reference_stroke {
                Some(r) => {
                    let ratio = closed_chain.lc / *r;
                    (barrel.map(|b| b.scaled(ratio)), rod.map(|b| b.scaled(ratio)))
                }
                None => (*barrel, *rod),
            },
            _ => (None, None),
        }
    }
}

/// Constant wrench applied to the robot at the TCP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wrench<T: Real> {
    pub force: Vector2<T>,
    pub moment: T,
}

fn default_gravity<T: Real>() -> Vector2<T> {
    Vector2::new(T::zero(), T::lit(-9.81))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct RobotModel<T: Real> {
    pub joints: Vec<Joint<T>>,
    #[serde(default = "default_gravity")]
    pub gravity: Vector2<T>,
    /// TCP in the last link frame; defaults to `(length, 0)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tcp: Option<Vector2<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Wrench<T>>,
}

/// Position, orientation and their first two time derivatives of a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameState<T: Real> {
    pub pos: Vector2<T>,
    pub angle: T,
    pub vel: Vector2<T>,
    pub omega: T,
    pub acc: Vector2<T>,
    pub alpha: T,
}

impl<T: Real> FrameState<T> {
    fn ground() -> Self {
        Self {
            pos: Vector2::zeros(),
            angle: T::zero(),
            vel: Vector2::zeros(),
            omega: T::zero(),
            acc: Vector2::zeros(),
            alpha: T::zero(),
        }
    }

    /// State of the point at world offset `r` from the origin, rigidly attached.
    fn shifted(&self, r: &Vector2<T>) -> Self {
        Self {
            pos: self.pos + r,
            vel: self.vel + perp(self.omega, r),
            acc: self.acc + perp(self.alpha, r) - r * (self.omega * self.omega),
            ..*self
        }
    }

    fn local(&self, p: &Vector2<T>) -> Self {
        self.shifted(&rotate(self.angle, p))
    }

    fn pose(&self) -> PlanarPose<T> {
        PlanarPose {
            position: self.pos,
            orientation: self.angle,
        }
    }
}

/// Motion of one body's COM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyMotion<T: Real> {
    pub body: LinkBody<T>,
    pub com: FrameState<T>,
}

/// Chain states and `(q̇1, q̈1)` per chain, in joint order.
pub type LoopInputs<'a, T> = (&'a [ChainState<T>], &'a [(T, T)]);

/// Everything a forward sweep produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep<T: Real> {
    /// Child frame of every joint (including fixed ones).
    pub frames: Vec<FrameState<T>>,
    /// Joint locations, carrying the parent's rotation.
    pub pivots: Vec<FrameState<T>>,
    pub bodies: Vec<BodyMotion<T>>,
    pub tcp: FrameState<T>,
}

/// Actuator-space result of inverse dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorLoads<T: Real> {
    /// Generalized forces on the independent coordinates, per DoF.
    pub torque: DVector<T>,
    /// Actuator forces, indexed by actuator.
    pub force: DVector<T>,
    /// Actuator velocities, indexed by actuator.
    pub velocity: DVector<T>,
    /// Actuator strokes (`x` for chains, extension for telescopes), by actuator.
    pub stroke: DVector<T>,
    /// Chain states in joint order.
    pub chains: Vec<ChainState<T>>,
}

/// Actuator force from a joint torque through `x → q` with `dq/dx = k1`.
pub fn actuator_force_from_torque<T: Real>(torque: T, k1: T) -> T {
    torque * k1
}

impl<T: Real> RobotModel<T> {
    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::Configuration("robot has no joints".into()));
        }
        let mut seen = Vec::new();
        for (i, j) in self.joints.iter().enumerate() {
            j.link.validate(&format!("joint {i} link"))?;
            match &j.kind {
                JointKind::ClosedChain {
                    closed_chain,
                    barrel,
                    rod,
                    reference_stroke,
                } => {
                    closed_chain.validate()?;
                    if let Some(b) = barrel {
                        b.validate(&format!("joint {i} barrel"))?;
                    }
                    if let Some(r) = rod {
                        r.validate(&format!("joint {i} rod"))?;
                    }
                    if let Some(r) = reference_stroke {
                        if !(*r > T::zero()) {
                            return Err(Error::Configuration(format!("joint {i}: reference stroke must be > 0")));
                        }
                    }
                }
                JointKind::PrismaticTelescope { axis } => {
                    if !(axis.norm() > T::zero()) {
                        return Err(Error::Configuration(format!("joint {i}: telescope axis is zero")));
                    }
                    if j.limits.is_none() {
                        return Err(Error::Configuration(format!("joint {i}: telescope needs limits")));
                    }
                }
                JointKind::Fixed => {}
            }
            if let Some([lo, hi]) = j.limits {
                if !(lo < hi) {
                    return Err(Error::Configuration(format!(
                        "joint {i}: limits must satisfy lower < upper"
                    )));
                }
            }
            if let Some(r) = j.rate_limit {
                if !(r > T::zero()) {
                    return Err(Error::Configuration(format!("joint {i}: rate limit must be > 0")));
                }
            }
            match (j.is_actuated(), j.actuator) {
                (true, Some(a)) => seen.push(a),
                (true, None) => {
                    return Err(Error::Configuration(format!(
                        "joint {i} is actuated but names no actuator"
                    )));
                }
                (false, Some(_)) => {
                    return Err(Error::Configuration(format!("fixed joint {i} cannot have an actuator")));
                }
                (false, None) => {}
            }
        }
        let mut sorted = seen.clone();
        sorted.sort_unstable();
        if sorted != (0..seen.len()).collect::<Vec<_>>() {
            return Err(Error::Configuration(
                "actuator indices must be a permutation of 0..n_a".into(),
            ));
        }
        Ok(())
    }

    /// Actuated degrees of freedom `n`.
    pub fn n_dof(&self) -> usize {
        self.joints.iter().filter(|j| j.is_actuated()).count()
    }

    pub fn n_actuators(&self) -> usize {
        self.n_dof()
    }

    /// Number of closed chains `m`.
    pub fn n_chains(&self) -> usize {
        self.joints.iter().filter(|j| j.chain().is_some()).count()
    }

    pub fn chains(&self) -> Vec<ClosedChainParams<T>> {
        self.joints.iter().filter_map(|j| j.chain().copied()).collect()
    }

    /// Actuated joints in DoF order.
    pub fn dof_joints(&self) -> impl Iterator<Item = &Joint<T>> {
        self.joints.iter().filter(|j| j.is_actuated())
    }

    /// Stacked `[L, Lc0, Lc]` of every chain.
    pub fn xi(&self) -> Vec<T> {
        self.chains().iter().flat_map(|c| c.xi()).collect()
    }

    /// Copy with the chain lengths replaced by `xi`.
    pub fn with_xi(&self, xi: &[T]) -> Result<Self> {
        if xi.len() != 3 * self.n_chains() {
            return Err(Error::Configuration(format!(
                "length vector has {} entries, expected {}",
                xi.len(),
                3 * self.n_chains()
            )));
        }
        let mut out = self.clone();
        let mut it = xi.chunks(3);
        for j in &mut out.joints {
            if let JointKind::ClosedChain { closed_chain, .. } = &mut j.kind {
                let c = it.next().unwrap_or(&[]);
                *closed_chain = closed_chain.with_xi([c[0], c[1], c[2]]);
            }
        }
        Ok(out)
    }

    /// Position limits per DoF; chains without explicit limits use their stroke range.
    pub fn joint_limits(&self) -> Result<Vec<[T; 2]>> {
        self.dof_joints()
            .map(|j| match (j.limits, j.chain()) {
                (Some(l), _) => Ok(l),
                (None, Some(c)) => {
                    let retracted = inner_angles_at_length(c, c.x0())?.q + c.psi;
                    let extended = inner_angles_at_length(c, c.x0() + c.lc)?.q + c.psi;
                    Ok([extended.min(retracted), extended.max(retracted)])
                }
                (None, None) => Err(Error::Configuration("joint without limits".into())),
            })
            .collect()
    }

    /// Rate limits per DoF (`None` when unbounded).
    pub fn rate_limits(&self) -> Vec<Option<T>> {
        self.dof_joints().map(|j| j.rate_limit).collect()
    }

    /// Actuator index per DoF.
    pub fn actuator_of_dof(&self) -> Vec<usize> {
        self.dof_joints().map(|j| j.actuator.unwrap_or(0)).collect()
    }

    fn check_dims(&self, v: &DVector<T>, what: &str) -> Result<()> {
        if v.len() != self.n_dof() {
            return Err(Error::Configuration(format!(
                "{what} has {} entries, robot has {} DoF",
                v.len(),
                self.n_dof()
            )));
        }
        Ok(())
    }

    pub fn check_limits(&self, theta: &DVector<T>) -> Result<()> {
        self.check_dims(theta, "joint vector")?;
        let slack = T::lit(LIMIT_SLACK);
        for (i, (lim, &t)) in self.joint_limits()?.iter().zip(theta.iter()).enumerate() {
            if !(t >= lim[0] - slack && t <= lim[1] + slack) {
                return Err(Error::Range(format!(
                    "joint {i} value {} outside [{}, {}]",
                    t.as_f64(),
                    lim[0].as_f64(),
                    lim[1].as_f64()
                )));
            }
        }
        Ok(())
    }

    /// Forward sweep. `loops` supplies chain states and `(q̇1, q̈1)` for every
    /// chain joint; without it the loop bodies are skipped.
    pub fn sweep(
        &self,
        theta: &DVector<T>,
        theta_dot: &DVector<T>,
        theta_ddot: &DVector<T>,
        loops: Option<LoopInputs<'_, T>>,
    ) -> Sweep<T> {
        let mut frame = FrameState::ground();
        let mut parent_length = T::zero();
        let mut dof = 0;
        let mut chain_idx = 0;
        let mut out = Sweep {
            frames: Vec::with_capacity(self.joints.len()),
            pivots: Vec::with_capacity(self.joints.len()),
            bodies: Vec::with_capacity(3 * self.joints.len()),
            tcp: frame,
        };
        for joint in &self.joints {
            let origin = joint.origin.unwrap_or_else(|| Vector2::new(parent_length, T::zero()));
            let pivot = frame.local(&origin);
            let j0 = frame.angle + joint.origin_angle.unwrap_or_else(T::zero);
            let child = match &joint.kind {
                JointKind::ClosedChain { closed_chain, .. } => {
                    let (th, thd, thdd) = (theta[dof], theta_dot[dof], theta_ddot[dof]);
                    dof += 1;
                    let child = FrameState {
                        angle: j0 + th,
                        omega: frame.omega + thd,
                        alpha: frame.alpha + thdd,
                        ..pivot
                    };
                    if let Some((states, rates)) = loops {
                        let (barrel, rod) = joint.loop_bodies();
                        let m = closed_chain.mounting_or_default();
                        let state = &states[chain_idx];
                        let (q1d, q1dd) = rates[chain_idx];
                        let phi_b = j0 + m.base_angle + T::pi() - state.angles.q1;
                        let base = pivot.shifted(&(unit(j0 + m.base_angle) * closed_chain.l));
                        let barrel_frame = FrameState {
                            angle: phi_b,
                            omega: frame.omega - q1d,
                            alpha: frame.alpha - q1dd,
                            ..base
                        };
                        let tip = child.shifted(&(unit(child.angle + m.rod_angle) * closed_chain.l1));
                        let rod_frame = FrameState {
                            pos: tip.pos,
                            vel: tip.vel,
                            acc: tip.acc,
                            ..barrel_frame
                        };
                        for (body, f) in [(barrel, barrel_frame), (rod, rod_frame)] {
                            if let Some(body) = body {
                                out.bodies.push(BodyMotion {
                                    body,
                                    com: f.local(&body.com_offset),
                                });
                            }
                        }
                    }
                    chain_idx += 1;
                    child
                }
                JointKind::PrismaticTelescope { axis } => {
                    let (d, dd, ddd) = (theta[dof], theta_dot[dof], theta_ddot[dof]);
                    dof += 1;
                    let a = rotate(j0, &axis.normalize());
                    let r = a * d;
                    let rel_v = a * dd;
                    FrameState {
                        pos: pivot.pos + r,
                        angle: j0,
                        vel: pivot.vel + perp(frame.omega, &r) + rel_v,
                        omega: frame.omega,
                        acc: pivot.acc + perp(frame.alpha, &r) - r * (frame.omega * frame.omega)
                            + perp(frame.omega, &rel_v) * T::lit(2.0)
                            + a * ddd,
                        alpha: frame.alpha,
                    }
                }
                JointKind::Fixed => FrameState { angle: j0, ..pivot },
            };
            out.bodies.push(BodyMotion {
                body: joint.link,
                com: child.local(&joint.link.com_offset),
            });
            out.pivots.push(pivot);
            out.frames.push(child);
            parent_length = joint.link.length;
            frame = child;
        }
        let tcp_local = self.tcp.unwrap_or_else(|| Vector2::new(parent_length, T::zero()));
        out.tcp = frame.local(&tcp_local);
        out
    }

    fn zeros(&self) -> DVector<T> {
        DVector::zeros(self.n_dof())
    }

    /// TCP pose without limit checks.
    pub fn tcp_pose_unchecked(&self, theta: &DVector<T>) -> PlanarPose<T> {
        let z = self.zeros();
        self.sweep(theta, &z, &z, None).tcp.pose().wrapped()
    }

    /// TCP pose; joint values must lie within their limits.
    pub fn tcp_pose(&self, theta: &DVector<T>) -> Result<PlanarPose<T>> {
        self.check_limits(theta)?;
        Ok(self.tcp_pose_unchecked(theta))
    }

    fn jacobian_from(&self, s: &Sweep<T>, velocities: bool) -> Matrix3xX<T> {
        let mut j = Matrix3xX::zeros(self.n_dof());
        let mut col = 0;
        for (i, joint) in self.joints.iter().enumerate() {
            let pivot = &s.pivots[i];
            match &joint.kind {
                JointKind::ClosedChain { .. } => {
                    let (lin, ang) = if velocities {
                        (perp(T::one(), &(s.tcp.vel - pivot.vel)), T::zero())
                    } else {
                        (perp(T::one(), &(s.tcp.pos - pivot.pos)), T::one())
                    };
                    j[(0, col)] = lin.x;
                    j[(1, col)] = lin.y;
                    j[(2, col)] = ang;
                    col += 1;
                }
                JointKind::PrismaticTelescope { axis } => {
                    let a = rotate(s.frames[i].angle, &axis.normalize());
                    let lin = if velocities { perp(pivot.omega, &a) } else { a };
                    j[(0, col)] = lin.x;
                    j[(1, col)] = lin.y;
                    col += 1;
                }
                JointKind::Fixed => {}
            }
        }
        j
    }

    /// Planar geometric Jacobian, rows `(ẋ, ż, φ̇)`, without limit checks.
    pub fn tcp_jacobian_unchecked(&self, theta: &DVector<T>) -> Matrix3xX<T> {
        let z = self.zeros();
        self.jacobian_from(&self.sweep(theta, &z, &z, None), false)
    }

    pub fn tcp_jacobian(&self, theta: &DVector<T>) -> Result<Matrix3xX<T>> {
        self.check_limits(theta)?;
        Ok(self.tcp_jacobian_unchecked(theta))
    }

    /// `J̇(θ, θ̇)` without limit checks.
    pub fn jacobian_dot_unchecked(&self, theta: &DVector<T>, theta_dot: &DVector<T>) -> Matrix3xX<T> {
        let z = self.zeros();
        self.jacobian_from(&self.sweep(theta, theta_dot, &z, None), true)
    }

    pub fn jacobian_dot(&self, theta: &DVector<T>, theta_dot: &DVector<T>) -> Result<Matrix3xX<T>> {
        self.check_limits(theta)?;
        self.check_dims(theta_dot, "joint rate vector")?;
        Ok(self.jacobian_dot_unchecked(theta, theta_dot))
    }

    /// Chain states for every chain joint in order.
    pub fn chain_states(
        &self,
        theta: &DVector<T>,
        theta_dot: &DVector<T>,
        theta_ddot: &DVector<T>,
    ) -> Result<Vec<ChainState<T>>> {
        self.dof_joints()
            .enumerate()
            .filter_map(|(i, j)| j.chain().map(|c| (i, c)))
            .map(|(i, c)| ChainState::from_joint(c, theta[i], theta_dot[i], theta_ddot[i]))
            .collect()
    }

    fn loop_rates(states: &[ChainState<T>]) -> Vec<(T, T)> {
        states.iter().map(|s| (s.rates[1], s.accels[1])).collect()
    }

    /// Generalized forces for the given motion and chain states.
    fn generalized_forces(
        &self,
        theta: &DVector<T>,
        theta_dot: &DVector<T>,
        theta_ddot: &DVector<T>,
        states: &[ChainState<T>],
    ) -> DVector<T> {
        let n = self.n_dof();
        let full = self.sweep(theta, theta_dot, theta_ddot, Some((states, &Self::loop_rates(states))));
        let zero = self.zeros();
        let dof_is_chain: Vec<bool> = self.dof_joints().map(|j| j.chain().is_some()).collect();
        let mut tau = DVector::zeros(n);
        for (j, &is_chain) in dof_is_chain.iter().enumerate() {
            let mut e = zero.clone();
            e[j] = T::one();
            let chain_j = dof_is_chain[..j].iter().filter(|&&c| c).count();
            let partial_rates: Vec<(T, T)> = states
                .iter()
                .enumerate()
                .map(|(ci, s)| {
                    if is_chain && ci == chain_j {
                        (s.k[1] / s.k[0], T::zero())
                    } else {
                        (T::zero(), T::zero())
                    }
                })
                .collect();
            let partial = self.sweep(theta, &e, &zero, Some((states, &partial_rates)));
            let mut t = T::zero();
            for (b, p) in full.bodies.iter().zip(&partial.bodies) {
                let inertial = (b.com.acc - self.gravity) * b.body.mass;
                t += inertial.dot(&p.com.vel) + b.body.inertia_about_com * b.com.alpha * p.com.omega;
            }
            if let Some(w) = &self.payload {
                t -= w.force.dot(&partial.tcp.vel) + w.moment * partial.tcp.omega;
            }
            tau[j] = t;
        }
        tau
    }

    /// Actuator forces and velocities for a joint-space motion.
    pub fn inverse_dynamics(
        &self,
        theta: &DVector<T>,
        theta_dot: &DVector<T>,
        theta_ddot: &DVector<T>,
    ) -> Result<ActuatorLoads<T>> {
        self.check_dims(theta, "joint vector")?;
        self.check_dims(theta_dot, "joint rate vector")?;
        self.check_dims(theta_ddot, "joint acceleration vector")?;
        let states = self.chain_states(theta, theta_dot, theta_ddot)?;
        let torque = self.generalized_forces(theta, theta_dot, theta_ddot, &states);
        let n_a = self.n_actuators();
        let mut force = DVector::zeros(n_a);
        let mut velocity = DVector::zeros(n_a);
        let mut stroke = DVector::zeros(n_a);
        let mut chain_iter = states.iter();
        for (i, joint) in self.dof_joints().enumerate() {
            let a = joint.actuator.unwrap_or(i);
            if joint.chain().is_some() {
                let s = chain_iter
                    .next()
                    .ok_or_else(|| Error::ModelInconsistency("missing chain state".into()))?;
                force[a] = actuator_force_from_torque(torque[i], s.k[0]);
                velocity[a] = s.x_dot;
                stroke[a] = s.x;
            } else {
                force[a] = torque[i];
                velocity[a] = theta_dot[i];
                stroke[a] = theta[i];
            }
        }
        if force.iter().chain(velocity.iter()).any(|v| !v.is_finite_val()) {
            return Err(Error::ModelInconsistency(
                "inverse dynamics produced a non-finite value".into(),
            ));
        }
        Ok(ActuatorLoads {
            torque,
            force,
            velocity,
            stroke,
            chains: states,
        })
    }

    /// Joint-space mass matrix by unit-acceleration probes at rest.
    pub fn mass_matrix(&self, theta: &DVector<T>) -> Result<DMatrix<T>> {
        let n = self.n_dof();
        let z = self.zeros();
        let states = self.chain_states(theta, &z, &z)?;
        let bias = self.generalized_forces(theta, &z, &z, &states);
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = z.clone();
            e[j] = T::one();
            let states = self.chain_states(theta, &z, &e)?;
            let col = self.generalized_forces(theta, &z, &e, &states) - &bias;
            m.set_column(j, &col);
        }
        Ok(m)
    }

    /// Kinetic plus gravitational potential energy of all bodies.
    pub fn mechanical_energy(&self, theta: &DVector<T>, theta_dot: &DVector<T>) -> Result<T> {
        let z = self.zeros();
        let states = self.chain_states(theta, theta_dot, &z)?;
        let s = self.sweep(theta, theta_dot, &z, Some((&states, &Self::loop_rates(&states))));
        let half = T::lit(0.5);
        Ok(s.bodies.iter().fold(T::zero(), |acc, b| {
            let m = b.body.mass;
            acc + half * m * b.com.vel.norm_squared() + half * b.body.inertia_about_com * b.com.omega * b.com.omega
                - m * self.gravity.dot(&b.com.pos)
        }))
    }

    /// Damped Newton on TCP position over the DoFs flagged `free`; the others
    /// keep their values from `guess`.
    pub fn solve_position_ik(
        &self,
        target: &Vector2<T>,
        guess: &DVector<T>,
        free: &[bool],
        tol: T,
        max_iter: usize,
    ) -> Result<DVector<T>> {
        self.check_dims(guess, "initial guess")?;
        let cols: Vec<usize> = (0..self.n_dof())
            .filter(|&i| free.get(i).copied().unwrap_or(false))
            .collect();
        let mut theta = guess.clone();
        let damping = T::lit(1e-9);
        for _ in 0..max_iter {
            let pose = self.tcp_pose_unchecked(&theta);
            let err = target - pose.position;
            if err.norm() < tol {
                return Ok(theta);
            }
            let j = self.tcp_jacobian_unchecked(&theta);
            let jr = DMatrix::from_fn(2, cols.len(), |r, c| j[(r, cols[c])]);
            let jt = jr.transpose();
            let mut a = &jr * &jt;
            a[(0, 0)] += damping;
            a[(1, 1)] += damping;
            let y = a
                .lu()
                .solve(&DVector::from_column_slice(err.as_slice()))
                .ok_or_else(|| Error::NearSingular("position Jacobian is singular".into()))?;
            let step = jt * y;
            for (c, &i) in cols.iter().enumerate() {
                theta[i] += step[c];
            }
        }
        Err(Error::Reachability { times: Vec::new() })
    }

    /// Joint and TCP points along the backbone for plotting, plus the chain
    /// triangles as `[pivot, base, rod attachment]`.
    pub fn structure_polyline(&self, theta: &DVector<T>) -> (Vec<Vector2<T>>, Vec<[Vector2<T>; 3]>) {
        let z = self.zeros();
        let s = self.sweep(theta, &z, &z, None);
        let mut pts: Vec<Vector2<T>> = s.pivots.iter().map(|p| p.pos).collect();
        pts.push(s.tcp.pos);
        let mut tris = Vec::new();
        for (i, joint) in self.joints.iter().enumerate() {
            if let Some(c) = joint.chain() {
                let m = c.mounting_or_default();
                let parent_angle = s.frames[i].angle - theta[self.dof_index(i)];
                let p = s.pivots[i].pos;
                tris.push([
                    p,
                    p + unit(parent_angle + m.base_angle) * c.l,
                    p + unit(s.frames[i].angle + m.rod_angle) * c.l1,
                ]);
            }
        }
        (pts, tris)
    }

    fn dof_index(&self, joint: usize) -> usize {
        self.joints[..joint].iter().filter(|j| j.is_actuated()).count()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::closed_chain::Mounting;
    use approx::assert_relative_eq;
    use nalgebra::{dvector, Matrix3};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain(l: f64, l1: f64, lc0: f64, lc: f64, base: f64) -> ClosedChainParams<f64> {
        ClosedChainParams::from_mounting(
            l,
            l1,
            lc,
            lc0,
            Mounting {
                base_angle: base,
                rod_angle: 0.0,
            },
        )
    }

    fn revolute(c: ClosedChainParams<f64>, link: LinkBody<f64>, actuator: usize) -> Joint<f64> {
        Joint {
            name: String::new(),
            kind: JointKind::ClosedChain {
                closed_chain: c,
                barrel: None,
                rod: None,
                reference_stroke: None,
            },
            origin: None,
            origin_angle: None,
            actuator: Some(actuator),
            limits: Some([-3.0, 3.0]),
            rate_limit: None,
            link,
        }
    }

    /// Two chain-driven booms and a telescope, with loop bodies.
    pub(crate) fn crane() -> RobotModel<f64> {
        let barrel = LinkBody {
            mass: 15.0,
            com_offset: Vector2::new(0.4, 0.0),
            inertia_about_com: 0.5,
            length: 0.9,
        };
        let rod = LinkBody {
            mass: 8.0,
            com_offset: Vector2::new(-0.4, 0.02),
            inertia_about_com: 0.3,
            length: 0.9,
        };
        let mut j1 = revolute(chain(1.75, 1.6, 0.544, 1.27, 2.0), LinkBody::slender_rod(300.0, 3.5), 0);
        j1.origin = Some(Vector2::new(0.0, 2.0));
        j1.limits = None;
        let mut j2 = revolute(chain(1.75, 1.5, 0.55, 1.2, 0.5), LinkBody::slender_rod(200.0, 2.5), 1);
        j2.limits = None;
        for j in [&mut j1, &mut j2] {
            if let JointKind::ClosedChain { barrel: b, rod: r, .. } = &mut j.kind {
                *b = Some(barrel);
                *r = Some(rod);
            }
        }
        let tele = Joint {
            name: "telescope".into(),
            kind: JointKind::PrismaticTelescope {
                axis: Vector2::new(1.0, 0.0),
            },
            origin: Some(Vector2::new(1.2, 0.0)),
            origin_angle: None,
            actuator: Some(2),
            limits: Some([0.0, 1.5]),
            rate_limit: Some(0.4),
            link: LinkBody {
                mass: 80.0,
                com_offset: Vector2::new(1.0, 0.05),
                inertia_about_com: 12.0,
                length: 2.0,
            },
        };
        RobotModel {
            joints: vec![j1, j2, tele],
            gravity: default_gravity(),
            tcp: None,
            payload: None,
        }
    }

    /// Mid-stroke configuration of [`crane`].
    pub(crate) fn crane_theta() -> DVector<f64> {
        dvector![0.3, -1.0, 0.6]
    }

    fn single_link(length: f64, mass: f64) -> RobotModel<f64> {
        let mut j = revolute(
            chain(1.75, 1.6, 0.544, 1.27, 1.5),
            LinkBody::slender_rod(mass, length),
            0,
        );
        j.origin = Some(Vector2::zeros());
        RobotModel {
            joints: vec![j],
            gravity: default_gravity(),
            tcp: None,
            payload: None,
        }
    }

    #[test]
    fn crane_is_valid() {
        let r = crane();
        r.validate().unwrap();
        assert_eq!((r.n_dof(), r.n_chains(), r.xi().len()), (3, 2, 6));
        r.check_limits(&crane_theta()).unwrap();
    }

    #[test]
    fn straight_chain_of_unit_links() {
        let mut r = single_link(1.0, 1.0);
        let mut j2 = r.joints[0].clone();
        j2.origin = None;
        j2.actuator = Some(1);
        let mut j3 = j2.clone();
        j3.actuator = Some(2);
        r.joints.extend([j2, j3]);
        let p = r.tcp_pose(&DVector::zeros(3)).unwrap();
        assert_relative_eq!(p.position, Vector2::new(3.0, 0.0), epsilon = 1e-15);
        assert_eq!(p.orientation, 0.0);
    }

    #[test]
    fn single_joint_at_right_angle() {
        let r = single_link(1.7, 1.0);
        let p = r.tcp_pose(&dvector![std::f64::consts::FRAC_PI_2]).unwrap();
        assert_relative_eq!(p.position, Vector2::new(0.0, 1.7), epsilon = 1e-15);
        assert!(matches!(r.tcp_pose(&dvector![3.5]), Err(Error::Range(_))));
    }

    fn homogeneous(x: f64, z: f64, a: f64) -> Matrix3<f64> {
        let (s, c) = a.sin_cos();
        Matrix3::new(c, -s, x, s, c, z, 0.0, 0.0, 1.0)
    }

    #[test]
    fn pose_matches_matrix_product() {
        let r = crane();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let th = dvector![
                rng.random_range(-0.3..0.8),
                rng.random_range(-1.7..-0.6),
                rng.random_range(0.0..1.5)
            ];
            let m = homogeneous(0.0, 2.0, th[0])
                * homogeneous(3.5, 0.0, th[1])
                * homogeneous(1.2, 0.0, 0.0)
                * homogeneous(th[2], 0.0, 0.0)
                * homogeneous(2.0, 0.0, 0.0);
            let p = r.tcp_pose_unchecked(&th);
            assert_relative_eq!(p.position.x, m[(0, 2)], epsilon = 1e-12);
            assert_relative_eq!(p.position.y, m[(1, 2)], epsilon = 1e-12);
            assert_relative_eq!(p.orientation, m[(1, 0)].atan2(m[(0, 0)]), epsilon = 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let r = crane();
        let th = crane_theta();
        let j = r.tcp_jacobian(&th).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut p = th.clone();
            let mut m = th.clone();
            p[i] += h;
            m[i] -= h;
            let (pp, pm) = (r.tcp_pose_unchecked(&p), r.tcp_pose_unchecked(&m));
            let fd = (pp.position - pm.position) / (2.0 * h);
            assert_relative_eq!(j[(0, i)], fd.x, epsilon = 1e-7);
            assert_relative_eq!(j[(1, i)], fd.y, epsilon = 1e-7);
            assert_relative_eq!(j[(2, i)], (pp.orientation - pm.orientation) / (2.0 * h), epsilon = 1e-7);
        }
        // prismatic column is the world axis direction
        let axis = unit(th[0] + th[1]);
        assert_relative_eq!(j[(0, 2)], axis.x, epsilon = 1e-14);
        assert_relative_eq!(j[(1, 2)], axis.y, epsilon = 1e-14);
    }

    #[test]
    fn jacobian_dot_matches_time_derivative() {
        let r = crane();
        let traj = |t: f64| dvector![0.3 + 0.2 * t.sin(), -1.0 + 0.3 * (1.3 * t).cos(), 0.6 + 0.4 * t.sin()];
        let rate = |t: f64| dvector![0.2 * t.cos(), -0.39 * (1.3 * t).sin(), 0.4 * t.cos()];
        let t = 0.8;
        let h = 1e-5;
        let jd = r.jacobian_dot(&traj(t), &rate(t)).unwrap();
        let fd = (r.tcp_jacobian_unchecked(&traj(t + h)) - r.tcp_jacobian_unchecked(&traj(t - h))) / (2.0 * h);
        assert_relative_eq!(jd, fd, epsilon = 1e-8);
    }

    #[test]
    fn static_torque_and_virtual_work_ratio() {
        let r = single_link(2.0, 10.0);
        let loads = r
            .inverse_dynamics(&dvector![0.0], &dvector![0.0], &dvector![0.0])
            .unwrap();
        assert_relative_eq!(loads.torque[0], 98.1, epsilon = 1e-12);
        assert_relative_eq!(actuator_force_from_torque(98.1, 2.0), 196.2, epsilon = 1e-12);
        assert_relative_eq!(loads.force[0], 98.1 * loads.chains[0].k[0], epsilon = 1e-12);
        assert_eq!(loads.velocity[0], 0.0);
    }

    #[test]
    fn zero_rates_give_zero_actuator_velocity() {
        let r = crane();
        let z = DVector::zeros(3);
        let loads = r
            .inverse_dynamics(&crane_theta(), &z, &dvector![0.3, -0.2, 0.1])
            .unwrap();
        assert!(loads.velocity.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn actuator_power_equals_joint_power() {
        let r = crane();
        let th = crane_theta();
        let thd = dvector![0.1, -0.15, 0.2];
        let loads = r.inverse_dynamics(&th, &thd, &dvector![0.05, 0.1, -0.2]).unwrap();
        let p_act = loads.force.dot(&loads.velocity);
        let p_joint = loads.torque.dot(&thd);
        assert_relative_eq!(p_act, p_joint, max_relative = 1e-12);
    }

    #[test]
    fn mass_matrix_is_symmetric_positive_definite() {
        let r = crane();
        let m = r.mass_matrix(&crane_theta()).unwrap();
        assert_relative_eq!(m.clone(), m.transpose(), max_relative = 1e-9, epsilon = 1e-9);
        assert!(m.cholesky().is_some());
    }

    #[test]
    fn inverse_dynamics_is_affine_in_acceleration() {
        let r = crane();
        let th = crane_theta();
        let thd = dvector![0.1, -0.15, 0.2];
        let a = dvector![0.3, -0.1, 0.2];
        let b = dvector![-0.2, 0.4, 0.1];
        let tau = |acc: &DVector<f64>| r.inverse_dynamics(&th, &thd, acc).unwrap().torque;
        let lhs = tau(&(&a + &b)) - tau(&DVector::zeros(3));
        let rhs = (tau(&a) - tau(&DVector::zeros(3))) + (tau(&b) - tau(&DVector::zeros(3)));
        assert_relative_eq!(lhs, rhs, epsilon = 1e-8);
    }

    #[test]
    fn energy_rate_equals_actuator_power() {
        let r = crane();
        let traj = |t: f64| dvector![0.3 + 0.2 * t.sin(), -1.0 + 0.3 * (1.3 * t).cos(), 0.6 + 0.4 * t.sin()];
        let rate = |t: f64| dvector![0.2 * t.cos(), -0.39 * (1.3 * t).sin(), 0.4 * t.cos()];
        let acc = |t: f64| dvector![-0.2 * t.sin(), -0.507 * (1.3 * t).cos(), -0.4 * t.sin()];
        let t = 0.9;
        let h = 1e-5;
        let de = (r.mechanical_energy(&traj(t + h), &rate(t + h)).unwrap()
            - r.mechanical_energy(&traj(t - h), &rate(t - h)).unwrap())
            / (2.0 * h);
        let loads = r.inverse_dynamics(&traj(t), &rate(t), &acc(t)).unwrap();
        assert_relative_eq!(loads.force.dot(&loads.velocity), de, max_relative = 1e-6);
    }

    #[test]
    fn payload_adds_jacobian_transpose_load() {
        let mut r = crane();
        let th = crane_theta();
        let z = DVector::zeros(3);
        let base = r.inverse_dynamics(&th, &z, &z).unwrap().torque;
        let w = Wrench {
            force: Vector2::new(0.0, -500.0),
            moment: 20.0,
        };
        r.payload = Some(w);
        let loaded = r.inverse_dynamics(&th, &z, &z).unwrap().torque;
        let j = r.tcp_jacobian(&th).unwrap();
        let expect = -(j.transpose() * nalgebra::Vector3::new(w.force.x, w.force.y, w.moment));
        assert_relative_eq!(loaded - base, expect, epsilon = 1e-9);
    }

    #[test]
    fn reference_stroke_scales_loop_bodies() {
        let mut r = crane();
        let z = DVector::zeros(3);
        let before = r.inverse_dynamics(&crane_theta(), &z, &z).unwrap().torque;
        if let JointKind::ClosedChain { reference_stroke, .. } = &mut r.joints[0].kind {
            *reference_stroke = Some(1.27);
        }
        let same = r.inverse_dynamics(&crane_theta(), &z, &z).unwrap().torque;
        assert_relative_eq!(before, same, epsilon = 1e-12);
        let longer = r.with_xi(&[1.75, 0.544, 1.4, 1.75, 0.55, 1.2]).unwrap();
        let (b, _) = longer.joints[0].loop_bodies();
        assert_relative_eq!(b.unwrap().mass, 15.0 * 1.4 / 1.27, epsilon = 1e-12);
    }

    #[test]
    fn ik_recovers_configuration() {
        let r = crane();
        let th = crane_theta();
        let target = r.tcp_pose_unchecked(&th).position;
        let guess = dvector![0.2, -0.9, 0.6];
        let sol = r
            .solve_position_ik(&target, &guess, &[true, true, false], 1e-12, 50)
            .unwrap();
        assert_relative_eq!(sol, th, epsilon = 1e-9);
    }

    #[test]
    fn with_xi_checks_length() {
        let r = crane();
        assert!(r.with_xi(&[1.0; 5]).is_err());
        let r2 = r.with_xi(&r.xi()).unwrap();
        assert_eq!(r, r2);
    }

    #[test]
    fn derived_limits_follow_stroke() {
        let r = crane();
        let lim = r.joint_limits().unwrap();
        let c = r.chains()[0];
        let lo = ChainState::from_actuator(&c, c.lc, 0.0, 0.0).unwrap().theta[0];
        let hi = ChainState::from_actuator(&c, 0.0, 0.0, 0.0).unwrap().theta[0];
        assert_relative_eq!(lim[0][0], lo, epsilon = 1e-12);
        assert_relative_eq!(lim[0][1], hi, epsilon = 1e-12);
    }

    #[test]
    fn robot_json_round_trip() {
        let r = crane();
        let s = serde_json::to_string(&r).unwrap();
        let back: RobotModel<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(r, back);
        assert!(s.contains("\"closed_chain\":{\"L\":1.75"));
    }

    #[test]
    fn single_precision_pose() {
        let r: RobotModel<f32> = serde_json::from_str(&serde_json::to_string(&crane()).unwrap()).unwrap();
        let p = r.tcp_pose_unchecked(&DVector::from_vec(vec![0.3f32, -1.0, 0.6]));
        let p64 = crane().tcp_pose_unchecked(&crane_theta());
        assert!((p.position.x as f64 - p64.position.x).abs() < 1e-4);
    }
}
