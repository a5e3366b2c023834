//! Scenario description, spiral reference generation and the projection of the
//! reference onto trajectories the spline can represent.

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{JointKind, RobotModel, Wrench};
use crate::emla::{build_efficiency_map, EmlaUnit};
use crate::error::{Error, Result};
use crate::nlp::{Bounds, Problem, SolverConfig, TrackingReference};
use crate::spline::{build_basis, fit_initial_controls, CollocationGrid, SplineBasis};

/// Archimedean spiral in the X-Z plane, swept with quintic time scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpiralSpec {
    pub center: [f64; 2],
    pub start_radius: f64,
    /// Radius gained per full revolution (m).
    pub growth_per_revolution: f64,
    /// Polar angle of the first point (rad).
    pub start_angle: f64,
    /// Signed swept angle (rad).
    pub angular_span: f64,
    /// Time to sweep the spiral, starting at the grid's `t0` (s).
    pub duration: f64,
    /// Start and end extension of every prismatic joint, moved with the same
    /// quintic profile. Defaults to holding the lower limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub telescope: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrajectorySpec {
    Spiral(SpiralSpec),
}

/// Time samples of a planar point trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartesianSamples {
    pub times: Vec<f64>,
    pub position: Vec<[f64; 2]>,
    pub velocity: Vec<[f64; 2]>,
    pub acceleration: Vec<[f64; 2]>,
}

/// Quintic rest-to-rest profile `σ(τ) = 10τ³ - 15τ⁴ + 6τ⁵` and its first two
/// derivatives in `τ`, clamped outside `[0, 1]`.
pub fn quintic(tau: f64) -> (f64, f64, f64) {
    if tau <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if tau >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let t2 = tau * tau;
    let t3 = t2 * tau;
    (
        t3 * (10.0 - 15.0 * tau + 6.0 * t2),
        30.0 * t2 * (1.0 - tau) * (1.0 - tau),
        60.0 * tau * (1.0 - tau) * (1.0 - 2.0 * tau),
    )
}

impl SpiralSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.center[0],
            self.center[1],
            self.start_radius,
            self.growth_per_revolution,
            self.start_angle,
            self.angular_span,
            self.duration,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Configuration("spiral parameters must be finite".into()));
        }
        if !(self.duration > 0.0) {
            return Err(Error::Configuration("spiral duration must be > 0".into()));
        }
        let end_radius = self.radius(self.angular_span.abs());
        if self.start_radius < 0.0 || end_radius < 0.0 {
            return Err(Error::Configuration("spiral radius must stay >= 0".into()));
        }
        Ok(())
    }

    /// Radius after sweeping `swept` radians.
    fn radius(&self, swept: f64) -> f64 {
        self.start_radius + self.growth_per_revolution * swept / std::f64::consts::TAU
    }

    /// Position, velocity and acceleration at time `t` (relative to the start).
    pub fn sample(&self, t: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
        let (sig, dsig, ddsig) = quintic(t / self.duration);
        let span = self.angular_span;
        let dir = span.signum();
        let phi = self.start_angle + span * sig;
        let phi_d = span * dsig / self.duration;
        let phi_dd = span * ddsig / (self.duration * self.duration);
        // r grows with the swept magnitude
        let r = self.radius(dir * (phi - self.start_angle));
        let r_prime = dir * self.growth_per_revolution / std::f64::consts::TAU;
        let (s, c) = phi.sin_cos();
        let u = Vector2::new(c, s);
        let n = Vector2::new(-s, c);
        let dp = u * r_prime + n * r;
        let ddp = n * (2.0 * r_prime) - u * r;
        let p = Vector2::new(self.center[0], self.center[1]) + u * r;
        let v = dp * phi_d;
        let a = ddp * (phi_d * phi_d) + dp * phi_dd;
        ([p.x, p.y], [v.x, v.y], [a.x, a.y])
    }
}

/// Samples the spiral at `times`, measured from `t0`.
pub fn generate_spiral(spec: &SpiralSpec, t0: f64, times: &[f64]) -> Result<CartesianSamples> {
    spec.validate()?;
    let mut out = CartesianSamples {
        times: times.to_vec(),
        position: Vec::with_capacity(times.len()),
        velocity: Vec::with_capacity(times.len()),
        acceleration: Vec::with_capacity(times.len()),
    };
    for &t in times {
        let (p, v, a) = spec.sample(t - t0);
        out.position.push(p);
        out.velocity.push(v);
        out.acceleration.push(a);
    }
    Ok(out)
}

/// Reference tracked by the optimizer together with the spline that realizes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedReference {
    pub reference: TrackingReference,
    /// Control points whose forward kinematics reproduce `reference` exactly.
    pub controls: Vec<f64>,
    /// RMS joint-space fit residual of the inverse-kinematics samples.
    pub fit_rms: f64,
    /// Largest distance between the projected path and the analytic spiral.
    pub max_path_deviation: f64,
    /// Analytic spiral at the grid points.
    pub spiral: CartesianSamples,
}

/// Solves position IK along a dense sampling of the spiral (prismatic joints
/// follow their schedule), fits the spline, and evaluates the fitted motion's
/// TCP kinematics on the grid. Every sample must be reachable with all joints
/// and actuator strokes inside their limits for the given robot.
pub fn project_reference(
    robot: &RobotModel<f64>,
    spec: &SpiralSpec,
    basis: &SplineBasis<f64>,
    seed: Option<&[f64]>,
) -> Result<ProjectedReference> {
    spec.validate()?;
    let grid = basis.grid;
    let n = robot.n_dof();
    let limits = robot.joint_limits()?;
    let revolute: Vec<bool> = robot.dof_joints().map(|j| j.chain().is_some()).collect();
    let prismatic: Vec<bool> = robot
        .dof_joints()
        .map(|j| matches!(j.kind, JointKind::PrismaticTelescope { .. }))
        .collect();
    let schedule = |t: f64, j: usize| -> f64 {
        let [a, b] = spec.telescope.unwrap_or([limits[j][0], limits[j][0]]);
        a + (b - a) * quintic((t - grid.t0) / spec.duration).0
    };

    let mut theta = match seed {
        Some(s) if s.len() == n => DVector::from_column_slice(s),
        Some(s) => {
            return Err(Error::Configuration(format!(
                "IK seed has {} entries, expected {n}",
                s.len()
            )))
        }
        None => DVector::from_iterator(n, limits.iter().map(|l| 0.5 * (l[0] + l[1]))),
    };

    let n_dense = (10 * grid.m + 1).max(5 * basis.n_ctrl);
    let t_end = grid.end();
    let dense: Vec<f64> = (0..n_dense)
        .map(|i| grid.t0 + (t_end - grid.t0) * i as f64 / (n_dense - 1) as f64)
        .collect();
    let path = generate_spiral(spec, grid.t0, &dense)?;
    let mut samples = Vec::with_capacity(n_dense);
    let mut unreachable = Vec::new();
    let zeros = DVector::zeros(n);
    for (i, &t) in dense.iter().enumerate() {
        for j in 0..n {
            if prismatic[j] {
                theta[j] = schedule(t, j);
            }
        }
        let target = Vector2::new(path.position[i][0], path.position[i][1]);
        match robot.solve_position_ik(&target, &theta, &revolute, 1e-12, 100) {
            Ok(sol) => {
                let within = sol.iter().zip(&limits).all(|(v, l)| *v >= l[0] && *v <= l[1]);
                let strokes_ok = robot
                    .chain_states(&sol, &zeros, &zeros)
                    .map(|states| {
                        states
                            .iter()
                            .zip(robot.chains())
                            .all(|(s, c)| s.x >= 0.0 && s.x <= c.lc)
                    })
                    .unwrap_or(false);
                if !(within && strokes_ok) {
                    unreachable.push(t);
                }
                theta = sol;
            }
            Err(_) => unreachable.push(t),
        }
        samples.push(theta.clone());
    }
    if !unreachable.is_empty() {
        return Err(Error::Reachability { times: unreachable });
    }

    let fit = fit_initial_controls(basis, &dense, &samples)?;
    let controls = fit.controls;
    let mut reference = TrackingReference {
        position: Vec::with_capacity(grid.len()),
        velocity: Vec::with_capacity(grid.len()),
        acceleration: Vec::with_capacity(grid.len()),
    };
    for k in 0..grid.len() {
        let s = basis.evaluate_at(k, &controls, n)?;
        let p = robot.tcp_pose_unchecked(&s.theta).position;
        let j = robot.tcp_jacobian_unchecked(&s.theta);
        let jd = robot.jacobian_dot_unchecked(&s.theta, &s.theta_dot);
        let v = j.fixed_rows::<2>(0) * &s.theta_dot;
        let a = jd.fixed_rows::<2>(0) * &s.theta_dot + j.fixed_rows::<2>(0) * &s.theta_ddot;
        reference.position.push([p.x, p.y]);
        reference.velocity.push([v.x, v.y]);
        reference.acceleration.push([a.x, a.y]);
    }
    let mut max_dev = 0.0_f64;
    for (i, &t) in dense.iter().enumerate() {
        let s = basis.evaluate(&controls, n, t.min(basis.t_end()))?;
        let p = robot.tcp_pose_unchecked(&s.theta).position;
        let d = Vector2::new(p.x - path.position[i][0], p.y - path.position[i][1]).norm();
        max_dev = max_dev.max(d);
    }
    let spiral = generate_spiral(spec, grid.t0, &grid.times())?;
    Ok(ProjectedReference {
        reference,
        controls,
        fit_rms: fit.rms_residual,
        max_path_deviation: max_dev,
        spiral,
    })
}

/// Optional overrides of the default bounds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundsSpec {
    /// Per chain `[L, Lc0, Lc]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi_lower: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi_upper: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_dot: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapGrid {
    pub force_nodes: usize,
    pub velocity_nodes: usize,
}

impl Default for MapGrid {
    fn default() -> Self {
        Self {
            force_nodes: 41,
            velocity_nodes: 41,
        }
    }
}

fn default_degree() -> usize {
    3
}

/// Scenario file contents. Paths are relative to the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub robot: String,
    /// One EMLA parameter file per actuator index.
    pub emla: Vec<String>,
    pub trajectory: TrajectorySpec,
    pub grid: CollocationGrid<f64>,
    /// Control points per joint.
    #[serde(rename = "N")]
    pub n_ctrl: usize,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub bounds: BoundsSpec,
    /// Per chain `[L, Lc0, Lc]`.
    pub initial_xi: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_c: Option<Vec<f64>>,
    #[serde(default)]
    pub map_grid: MapGrid,
    /// Joint vector used to start inverse kinematics at the first sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ik_seed: Option<Vec<f64>>,
    /// Constant TCP load; replaces the robot file's payload when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Wrench<f64>>,
}

/// A scenario with every file resolved and the design problem transcribed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    /// Robot as described on disk.
    pub robot_file: RobotModel<f64>,
    pub units: Vec<EmlaUnit<f64>>,
    pub projection: ProjectedReference,
    pub problem: Problem,
    /// Initial decision vector.
    pub z0: Vec<f64>,
}

impl ScenarioSpec {
    pub fn spiral(&self) -> &SpiralSpec {
        match &self.trajectory {
            TrajectorySpec::Spiral(s) => s,
        }
    }

    pub fn flat_initial_xi(&self) -> Vec<f64> {
        self.initial_xi.iter().flatten().copied().collect()
    }

    pub fn basis(&self) -> Result<SplineBasis<f64>> {
        self.grid.validate()?;
        build_basis(self.degree, self.n_ctrl, &self.grid)
    }

    fn bounds(&self, robot: &RobotModel<f64>, units: &[EmlaUnit<f64>]) -> Result<Bounds> {
        let xi0 = self.flat_initial_xi();
        let flat = |v: &Option<Vec<[f64; 3]>>| v.as_ref().map(|v| v.iter().flatten().copied().collect::<Vec<_>>());
        Ok(Bounds {
            xi_lower: flat(&self.bounds.xi_lower).unwrap_or_else(|| vec![1e-3; xi0.len()]),
            xi_upper: flat(&self.bounds.xi_upper).unwrap_or_else(|| xi0.iter().map(|v| 3.0 * v).collect()),
            theta: match &self.bounds.theta {
                Some(t) => t.clone(),
                None => robot.joint_limits()?,
            },
            theta_dot: self
                .bounds
                .theta_dot
                .clone()
                .unwrap_or_else(|| robot.rate_limits().iter().map(|r| r.unwrap_or(1e3)).collect()),
            force: self
                .bounds
                .force
                .clone()
                .unwrap_or_else(|| units.iter().map(|u| u.drivetrain.force_limits).collect()),
            velocity: self
                .bounds
                .velocity
                .clone()
                .unwrap_or_else(|| units.iter().map(|u| u.drivetrain.velocity_limits).collect()),
        })
    }

    /// Applies the initial lengths, projects the reference and transcribes the problem.
    pub fn build(&self, robot_file: RobotModel<f64>, units: Vec<EmlaUnit<f64>>) -> Result<Scenario> {
        robot_file.validate()?;
        if self.initial_xi.len() != robot_file.n_chains() {
            return Err(Error::Configuration(format!(
                "scenario gives {} chain length sets, robot has {} chains",
                self.initial_xi.len(),
                robot_file.n_chains()
            )));
        }
        if units.len() != robot_file.n_actuators() {
            return Err(Error::Configuration(format!(
                "scenario names {} EMLA files, robot has {} actuators",
                units.len(),
                robot_file.n_actuators()
            )));
        }
        for u in &units {
            u.validate()?;
        }
        self.solver.validate()?;
        let xi0 = self.flat_initial_xi();
        let mut robot = robot_file.with_xi(&xi0)?;
        if self.payload.is_some() {
            robot.payload = self.payload;
        }
        robot.validate()?;
        let basis = self.basis()?;
        let projection = project_reference(&robot, self.spiral(), &basis, self.ik_seed.as_deref())?;
        let maps = units
            .iter()
            .map(|u| {
                build_efficiency_map(
                    &u.pmsm,
                    &u.drivetrain,
                    self.map_grid.force_nodes,
                    self.map_grid.velocity_nodes,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let bounds = self.bounds(&robot, &units)?;
        let problem = Problem::new(robot, maps, basis, projection.reference.clone(), bounds)?;
        let c0 = self.initial_c.clone().unwrap_or_else(|| projection.controls.clone());
        let z0 = problem.layout.pack(&xi0, &c0)?;
        Ok(Scenario {
            spec: self.clone(),
            robot_file,
            units,
            projection,
            problem,
            z0,
        })
    }
}
