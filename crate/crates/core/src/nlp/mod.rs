//! Transcription of the link-length design problem over the decision vector
//! `z = [Ξ, c]`: `Ξ` stacks `[L, Lc0, Lc]` per chain, `c` stacks `N` spline
//! control points per joint (joint-major).
//!
//! Equality rows, in order:
//! 1. TCP position error at every grid point, `(x, z)` per point;
//! 2. TCP velocity error at interior points;
//! 3. TCP acceleration error at interior points.
//!
//! Inequality rows (`g ≤ 0`), grouped per grid point, in order:
//! 1. per actuator: `v - v_max`, `v_min - v`;
//! 2. per actuator: `f - f_max`, `f_min - f`;
//! 3. per joint: `θ - θ_max`, `θ_min - θ`;
//! 4. per joint: `θ̇ - θ̇_max`, `-θ̇_max - θ̇`;
//! 5. per chain: `-x`, `x - Lc`, `Lc0 + x + Lc - (L + L1)`.
//!
//! followed by three design rows per chain keeping the triangle closable over
//! the whole stroke, with margin `δ`: `x0 + Lc - (L + L1) + δ`,
//! `(L - L1) - x0 + δ` and `(L1 - L) - x0 + δ`, where `x0 = Lc + Lc0`.
//!
//! Length positivity is a variable bound. Triangle and loop-closure residuals
//! are reported per point and chain but are satisfied by construction.

mod report;
mod sqp;

pub use report::{energy_report, plain_energy, trapezoid, EnergyReport, LengthRow, Structure};
pub use sqp::{fd_gradient, solve, IterationRecord, Nlp, NlpPoint, SolverConfig, SolverOutcome, SolverStatus};

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::closed_chain::{length_from_inner_angle, ChainState, SINGULARITY_EPS};
use crate::dynamics::RobotModel;
use crate::emla::EfficiencyMap;
use crate::error::{Error, Result};
use crate::scalar::wrap_angle;
use crate::spline::SplineBasis;

/// Objective value returned when the geometry cannot be evaluated.
pub const PENALTY_SENTINEL: f64 = 1e12;

/// Clearance (m) the design rows keep from a degenerate triangle at either stroke end.
pub const CLOSABILITY_MARGIN: f64 = 1e-4;

/// Cartesian reference (TCP position, velocity, acceleration) at the grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReference {
    pub position: Vec<[f64; 2]>,
    pub velocity: Vec<[f64; 2]>,
    pub acceleration: Vec<[f64; 2]>,
}

/// Box bounds for the design problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub xi_lower: Vec<f64>,
    pub xi_upper: Vec<f64>,
    /// Per joint.
    pub theta: Vec<[f64; 2]>,
    /// Per joint, symmetric.
    pub theta_dot: Vec<f64>,
    /// Per actuator.
    pub force: Vec<[f64; 2]>,
    /// Per actuator.
    pub velocity: Vec<[f64; 2]>,
}

/// Sizes of the two parts of the decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionLayout {
    pub n_xi: usize,
    pub n_c: usize,
}

impl DecisionLayout {
    pub fn len(&self) -> usize {
        self.n_xi + self.n_c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pack(&self, xi: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        if xi.len() != self.n_xi || c.len() != self.n_c {
            return Err(Error::Configuration(format!(
                "decision parts have lengths ({}, {}), expected ({}, {})",
                xi.len(),
                c.len(),
                self.n_xi,
                self.n_c
            )));
        }
        Ok(xi.iter().chain(c).copied().collect())
    }

    pub fn split<'a>(&self, z: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        z.split_at(self.n_xi)
    }
}

/// Per-point values along the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub t: f64,
    pub theta: Vec<f64>,
    pub theta_dot: Vec<f64>,
    pub theta_ddot: Vec<f64>,
    pub tcp: [f64; 2],
    pub reference: [f64; 2],
    /// Per actuator.
    pub stroke: Vec<f64>,
    pub force: Vec<f64>,
    pub velocity: Vec<f64>,
    pub mech_power: Vec<f64>,
    pub efficiency: Vec<f64>,
    pub input_power: Vec<f64>,
    /// False when the chain geometry could not be evaluated at this point.
    pub valid: bool,
}

impl PointRecord {
    pub fn total_input_power(&self) -> f64 {
        self.input_power.iter().sum()
    }
}

/// All residuals at one decision vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub equality: Vec<f64>,
    pub inequality: Vec<f64>,
    /// `q + q1 + q2 + π` per point and chain.
    pub triangle: Vec<f64>,
    /// Loop-closure `(Δx, Δz, Δangle)` per point and chain.
    pub closure: Vec<[f64; 3]>,
}

impl ConstraintSet {
    pub fn max_equality(&self) -> f64 {
        self.equality.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_inequality_violation(&self) -> f64 {
        self.inequality.iter().fold(0.0, |m, v| m.max(*v))
    }

    pub fn max_violation(&self) -> f64 {
        self.max_equality().max(self.max_inequality_violation())
    }

    pub fn max_structural(&self) -> f64 {
        let t = self.triangle.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        self.closure.iter().flatten().fold(t, |m, v| m.max(v.abs()))
    }
}

/// Everything computed at one decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    /// True when some point fell back to the penalty sentinel.
    pub penalized: bool,
    pub constraints: ConstraintSet,
    pub points: Vec<PointRecord>,
}

/// `½ Δt Σ_k (P_k)²` for the total input power `P_k` at each grid point.
pub fn power_cost(dt: f64, total_power: &[f64]) -> f64 {
    0.5 * dt * total_power.iter().map(|p| p * p).sum::<f64>()
}

/// The transcribed design problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub robot: RobotModel<f64>,
    /// Efficiency map per actuator.
    pub maps: Vec<EfficiencyMap<f64>>,
    pub basis: SplineBasis<f64>,
    pub reference: TrackingReference,
    pub bounds: Bounds,
    pub layout: DecisionLayout,
    ineq_scale: Vec<f64>,
}

impl Problem {
    pub fn new(
        robot: RobotModel<f64>,
        maps: Vec<EfficiencyMap<f64>>,
        basis: SplineBasis<f64>,
        reference: TrackingReference,
        bounds: Bounds,
    ) -> Result<Self> {
        robot.validate()?;
        let n = robot.n_dof();
        let na = robot.n_actuators();
        let m = robot.n_chains();
        let points = basis.grid.len();
        let check = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Configuration(format!(
                    "{what} has {got} entries, expected {want}"
                )))
            }
        };
        check("efficiency map list", maps.len(), na)?;
        for map in &maps {
            map.validate()?;
        }
        check("reference positions", reference.position.len(), points)?;
        check("reference velocities", reference.velocity.len(), points)?;
        check("reference accelerations", reference.acceleration.len(), points)?;
        check("lower length bounds", bounds.xi_lower.len(), 3 * m)?;
        check("upper length bounds", bounds.xi_upper.len(), 3 * m)?;
        check("joint limits", bounds.theta.len(), n)?;
        check("joint rate limits", bounds.theta_dot.len(), n)?;
        check("force limits", bounds.force.len(), na)?;
        check("velocity limits", bounds.velocity.len(), na)?;
        if bounds
            .xi_lower
            .iter()
            .zip(&bounds.xi_upper)
            .any(|(lo, hi)| !(*lo > 0.0 && lo <= hi))
        {
            return Err(Error::Configuration(
                "length bounds must satisfy 0 < lower <= upper (21g)".into(),
            ));
        }
        let layout = DecisionLayout {
            n_xi: 3 * m,
            n_c: basis.n_coeffs(n),
        };
        let mut problem = Self {
            robot,
            maps,
            basis,
            reference,
            bounds,
            layout,
            ineq_scale: Vec::new(),
        };
        problem.ineq_scale = problem.build_ineq_scale();
        Ok(problem)
    }

    pub fn n_vars(&self) -> usize {
        self.layout.len()
    }

    fn n_points(&self) -> usize {
        self.basis.grid.len()
    }

    pub fn n_equality(&self) -> usize {
        let k = self.n_points();
        2 * k + 4 * (k - 2)
    }

    fn ineq_per_point(&self) -> usize {
        4 * self.robot.n_actuators() + 4 * self.robot.n_dof() + 3 * self.robot.n_chains()
    }

    pub fn n_inequality(&self) -> usize {
        self.ineq_per_point() * self.n_points() + 3 * self.robot.n_chains()
    }

    fn build_ineq_scale(&self) -> Vec<f64> {
        let span = |b: &[f64; 2]| 1.0 / b[0].abs().max(b[1].abs()).max(1e-12);
        let mut row = Vec::with_capacity(self.ineq_per_point());
        for b in &self.bounds.velocity {
            row.extend([span(b); 2]);
        }
        for b in &self.bounds.force {
            row.extend([span(b); 2]);
        }
        row.extend(std::iter::repeat_n(1.0, 2 * self.robot.n_dof()));
        for r in &self.bounds.theta_dot {
            row.extend([1.0 / r.max(1e-12); 2]);
        }
        row.extend(std::iter::repeat_n(1.0, 3 * self.robot.n_chains()));
        let mut out = Vec::with_capacity(self.n_inequality());
        for _ in 0..self.n_points() {
            out.extend_from_slice(&row);
        }
        out.extend(std::iter::repeat_n(1.0, 3 * self.robot.n_chains()));
        out
    }

    /// Variable bounds: lengths boxed, control points free.
    pub fn variable_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = self.bounds.xi_lower.clone();
        let mut hi = self.bounds.xi_upper.clone();
        lo.extend(std::iter::repeat_n(f64::NEG_INFINITY, self.layout.n_c));
        hi.extend(std::iter::repeat_n(f64::INFINITY, self.layout.n_c));
        (lo, hi)
    }

    /// Full evaluation at `z`.
    pub fn evaluate(&self, z: &[f64]) -> Result<Evaluation> {
        if z.len() != self.n_vars() {
            return Err(Error::Configuration(format!(
                "decision vector has {} entries, expected {}",
                z.len(),
                self.n_vars()
            )));
        }
        let (xi, c) = self.layout.split(z);
        let robot = self.robot.with_xi(xi)?;
        let chains = robot.chains();
        let n = robot.n_dof();
        let na = robot.n_actuators();
        let k_last = self.n_points() - 1;
        let dof_chain: Vec<Option<usize>> = {
            let mut ci = 0;
            robot
                .dof_joints()
                .map(|j| {
                    j.chain().map(|_| {
                        ci += 1;
                        ci - 1
                    })
                })
                .collect()
        };

        let mut eq_pos = Vec::with_capacity(2 * self.n_points());
        let mut eq_vel = Vec::new();
        let mut eq_acc = Vec::new();
        let mut cons = ConstraintSet::default();
        cons.inequality.reserve(self.n_inequality());
        let mut points = Vec::with_capacity(self.n_points());
        let mut penalty = 0.0;
        let mut penalized = false;

        for k in 0..self.n_points() {
            let s = self.basis.evaluate_at(k, c, n)?;
            let (th, thd, thdd) = (&s.theta, &s.theta_dot, &s.theta_ddot);
            let pose = robot.tcp_pose_unchecked(th);
            let r = &self.reference;
            eq_pos.extend([pose.position.x - r.position[k][0], pose.position.y - r.position[k][1]]);
            if k > 0 && k < k_last {
                let j = robot.tcp_jacobian_unchecked(th);
                let jd = robot.jacobian_dot_unchecked(th, thd);
                let v = j.fixed_rows::<2>(0) * thd;
                let a = jd.fixed_rows::<2>(0) * thd + j.fixed_rows::<2>(0) * thdd;
                eq_vel.extend([v.x - r.velocity[k][0], v.y - r.velocity[k][1]]);
                eq_acc.extend([a.x - r.acceleration[k][0], a.y - r.acceleration[k][1]]);
            }

            let mut rec = PointRecord {
                t: self.basis.grid.time(k),
                theta: th.iter().copied().collect(),
                theta_dot: thd.iter().copied().collect(),
                theta_ddot: thdd.iter().copied().collect(),
                tcp: [pose.position.x, pose.position.y],
                reference: r.position[k],
                stroke: vec![0.0; na],
                force: vec![0.0; na],
                velocity: vec![0.0; na],
                mech_power: vec![0.0; na],
                efficiency: vec![1.0; na],
                input_power: vec![0.0; na],
                valid: true,
            };

            match robot.inverse_dynamics(th, thd, thdd) {
                Ok(loads) => {
                    for i in 0..na {
                        let (f, v) = (loads.force[i], loads.velocity[i]);
                        let eta = self.maps[i].lookup(f, v);
                        let p = f * v;
                        rec.stroke[i] = loads.stroke[i];
                        rec.force[i] = f;
                        rec.velocity[i] = v;
                        rec.mech_power[i] = p;
                        rec.efficiency[i] = eta;
                        rec.input_power[i] = p / eta;
                    }
                    for (state, params) in loads.chains.iter().zip(&chains) {
                        cons.triangle.push(state.angles.triangle_residual());
                        let cl = state.closure_residual(params);
                        cons.closure.push([cl.x, cl.y, cl.z]);
                    }
                }
                Err(_) => {
                    rec.valid = false;
                    penalized = true;
                    for (ci, params) in chains.iter().enumerate() {
                        let idx = dof_chain.iter().position(|d| *d == Some(ci)).unwrap_or(0);
                        let q = wrap_angle(th[idx] - params.psi);
                        let eps = SINGULARITY_EPS;
                        penalty += (q + eps).max(0.0) + (-std::f64::consts::PI + eps - q).max(0.0);
                        cons.triangle.push(0.0);
                        cons.closure.push([0.0; 3]);
                    }
                }
            }

            // inequality rows for this point
            let g = &mut cons.inequality;
            for (i, b) in self.bounds.velocity.iter().enumerate() {
                g.extend([rec.velocity[i] - b[1], b[0] - rec.velocity[i]]);
            }
            for (i, b) in self.bounds.force.iter().enumerate() {
                g.extend([rec.force[i] - b[1], b[0] - rec.force[i]]);
            }
            for (j, b) in self.bounds.theta.iter().enumerate() {
                g.extend([th[j] - b[1], b[0] - th[j]]);
            }
            for (j, r) in self.bounds.theta_dot.iter().enumerate() {
                g.extend([thd[j] - r, -r - thd[j]]);
            }
            for (ci, params) in chains.iter().enumerate() {
                let idx = dof_chain.iter().position(|d| *d == Some(ci)).unwrap_or(0);
                let q = wrap_angle(th[idx] - params.psi);
                let x = length_from_inner_angle(params, q) - params.x0();
                g.extend([-x, x - params.lc, params.lc0 + x + params.lc - (params.l + params.l1)]);
            }
            points.push(rec);
        }
        for p in &chains {
            let (x0, d) = (p.x0(), CLOSABILITY_MARGIN);
            cons.inequality.extend([
                x0 + p.lc - (p.l + p.l1) + d,
                (p.l - p.l1) - x0 + d,
                (p.l1 - p.l) - x0 + d,
            ]);
        }

        cons.equality = eq_pos;
        cons.equality.extend(eq_vel);
        cons.equality.extend(eq_acc);
        let totals: Vec<f64> = points.iter().map(PointRecord::total_input_power).collect();
        let mut objective = power_cost(self.basis.grid.dt, &totals);
        if penalized || !objective.is_finite() {
            penalized = true;
            objective = PENALTY_SENTINEL + penalty;
        }
        Ok(Evaluation {
            objective,
            penalized,
            constraints: cons,
            points,
        })
    }

    pub fn objective(&self, z: &[f64]) -> Result<f64> {
        Ok(self.evaluate(z)?.objective)
    }

    pub fn constraints(&self, z: &[f64]) -> Result<ConstraintSet> {
        Ok(self.evaluate(z)?.constraints)
    }

    /// Chain states at grid point `k` (for cross-checks).
    pub fn chain_states_at(&self, z: &[f64], k: usize) -> Result<Vec<ChainState<f64>>> {
        let (xi, c) = self.layout.split(z);
        let robot = self.robot.with_xi(xi)?;
        let s = self.basis.evaluate_at(k, c, robot.n_dof())?;
        robot.chain_states(&s.theta, &s.theta_dot, &s.theta_ddot)
    }

    /// Joint samples for a control vector, as plain vectors.
    pub fn joint_samples(&self, c: &[f64]) -> Result<Vec<DVector<f64>>> {
        (0..self.n_points())
            .map(|k| Ok(self.basis.evaluate_at(k, c, self.robot.n_dof())?.theta))
            .collect()
    }

    /// TCP points of the reference, for plotting.
    pub fn reference_points(&self) -> Vec<Vector2<f64>> {
        self.reference
            .position
            .iter()
            .map(|p| Vector2::new(p[0], p[1]))
            .collect()
    }
}

impl Nlp for Problem {
    fn n_vars(&self) -> usize {
        self.layout.len()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        self.variable_bounds()
    }

    fn evaluate(&self, z: &[f64]) -> NlpPoint {
        match Problem::evaluate(self, z) {
            Ok(e) => NlpPoint {
                objective: e.objective,
                equality: e.constraints.equality,
                inequality: e.constraints.inequality,
                penalized: e.penalized,
            },
            Err(_) => NlpPoint {
                objective: PENALTY_SENTINEL,
                equality: vec![0.0; self.n_equality()],
                inequality: vec![0.0; self.n_inequality()],
                penalized: true,
            },
        }
    }

    fn inequality_scale(&self) -> Vec<f64> {
        self.ineq_scale.clone()
    }
}

/// Optimizer output for the design problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub status: SolverStatus,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub function_evaluations: usize,
    pub xi_initial: Vec<f64>,
    pub xi_final: Vec<f64>,
    pub c_initial: Vec<f64>,
    pub c_final: Vec<f64>,
    pub objective_initial: f64,
    pub objective_final: f64,
    pub objective_trace: Vec<f64>,
    pub merit_trace: Vec<f64>,
    pub best_merit_trace: Vec<f64>,
    pub violation_trace: Vec<f64>,
    pub iterations_log: Vec<IterationRecord>,
    pub max_equality_residual: f64,
    pub max_inequality_violation: f64,
    pub max_structural_residual: f64,
    pub series_initial: Vec<PointRecord>,
    pub series_final: Vec<PointRecord>,
    pub energy: EnergyReport,
    /// Timing; left out of the serialized form so result files are reproducible.
    #[serde(skip)]
    pub stats: RunStats,
}

/// Timing figures, the only non-deterministic part of a run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunStats {
    pub wall_clock_seconds: f64,
    pub seconds_per_iteration: f64,
}

/// Runs the solver from `z0` and packages traces, series and the energy report.
pub fn optimize(problem: &Problem, z0: &[f64], config: &SolverConfig) -> Result<OptimizationResult> {
    let start = std::time::Instant::now();
    let initial = problem.evaluate(z0)?;
    if initial.penalized {
        return Err(Error::GeometryInfeasible(
            "initial design cannot be evaluated along the trajectory".into(),
        ));
    }
    let outcome = solve(problem, z0, config)?;
    let fin = problem.evaluate(&outcome.z)?;
    let (xi0, c0) = problem.layout.split(z0);
    let (xi1, c1) = problem.layout.split(&outcome.z);
    let energy = energy_report(problem, z0, &outcome.z, &initial, &fin)?;
    let elapsed = start.elapsed().as_secs_f64();
    Ok(OptimizationResult {
        status: outcome.status,
        iterations: outcome.iterations,
        accepted_steps: outcome.accepted_steps,
        function_evaluations: outcome.evaluations,
        xi_initial: xi0.to_vec(),
        xi_final: xi1.to_vec(),
        c_initial: c0.to_vec(),
        c_final: c1.to_vec(),
        objective_initial: initial.objective,
        objective_final: fin.objective,
        objective_trace: outcome.objective_trace,
        merit_trace: outcome.merit_trace,
        best_merit_trace: outcome.best_merit_trace,
        violation_trace: outcome.violation_trace,
        iterations_log: outcome.log,
        max_equality_residual: fin.constraints.max_equality(),
        max_inequality_violation: fin.constraints.max_inequality_violation(),
        max_structural_residual: fin.constraints.max_structural(),
        series_initial: initial.points,
        series_final: fin.points,
        energy,
        stats: RunStats {
            wall_clock_seconds: elapsed,
            seconds_per_iteration: elapsed / outcome.iterations.max(1) as f64,
        },
    })
}
