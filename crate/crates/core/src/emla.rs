//! Electromechanical linear actuator drivetrain: PMSM in the rotating dq frame,
//! gearbox and ball/roller screw, steady-state operating points and gridded
//! efficiency maps over the load-side force/velocity rectangle.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Lowest efficiency ever reported or interpolated. Keeps `P / eta` bounded.
pub const ETA_FLOOR: f64 = 0.05;

/// Both powers below this magnitude (W) count as a zero-power operating point.
pub const ZERO_POWER: f64 = 1e-9;

/// Permanent magnet synchronous motor parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct PmsmParams<T> {
    /// Ohm.
    pub stator_resistance: T,
    /// Henry.
    pub inductance_d: T,
    /// Henry.
    pub inductance_q: T,
    pub pole_pairs: u32,
    /// Weber.
    pub pm_flux: T,
    /// kg·m².
    pub rotor_inertia: T,
    /// N·m·s/rad.
    #[serde(default = "default_viscous")]
    pub viscous_friction: T,
    /// N·m.
    #[serde(default = "default_coulomb")]
    pub coulomb_friction: T,
}

fn default_viscous<T: Real>() -> T {
    T::lit(1e-4)
}

fn default_coulomb<T: Real>() -> T {
    T::lit(0.05)
}

impl<T: Real> PmsmParams<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stator_resistance", self.stator_resistance),
            ("inductance_d", self.inductance_d),
            ("inductance_q", self.inductance_q),
            ("pm_flux", self.pm_flux),
        ];
        for (name, v) in positive {
            if !(v > T::zero()) || !v.is_finite_val() {
                return Err(Error::Configuration(format!("pmsm {name} must be > 0")));
            }
        }
        let nonneg = [
            ("rotor_inertia", self.rotor_inertia),
            ("viscous_friction", self.viscous_friction),
            ("coulomb_friction", self.coulomb_friction),
        ];
        for (name, v) in nonneg {
            if !(v >= T::zero()) || !v.is_finite_val() {
                return Err(Error::Configuration(format!("pmsm {name} must be >= 0")));
            }
        }
        if self.pole_pairs < 1 {
            return Err(Error::Configuration("pmsm pole_pairs must be >= 1".into()));
        }
        Ok(())
    }

    /// Friction torque opposing the rotor: viscous plus Coulomb.
    pub fn friction_torque(&self, rotor_speed: T) -> T {
        self.viscous_friction * rotor_speed + self.coulomb_friction * rotor_speed.signum0()
    }
}

/// Gearbox, screw and load-side parameters of one actuator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivetrainParams<T> {
    /// Screw lead, m per revolution.
    pub screw_lead: T,
    pub gear_ratio: T,
    /// kg.
    pub translating_mass: T,
    /// N·s/m.
    pub load_viscous: T,
    /// N, `[low, up]`.
    pub force_limits: [T; 2],
    /// m/s, `[low, up]`.
    pub velocity_limits: [T; 2],
}

impl<T: Real> DrivetrainParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.screw_lead > T::zero()) || !(self.gear_ratio > T::zero()) {
            return Err(Error::Configuration(
                "drivetrain screw_lead and gear_ratio must be > 0".into(),
            ));
        }
        if !(self.translating_mass >= T::zero()) || !(self.load_viscous >= T::zero()) {
            return Err(Error::Configuration(
                "drivetrain translating_mass and load_viscous must be >= 0".into(),
            ));
        }
        if !(self.force_limits[0] < self.force_limits[1]) {
            return Err(Error::Configuration("force_limits must satisfy low < up".into()));
        }
        if !(self.velocity_limits[0] < self.velocity_limits[1]) {
            return Err(Error::Configuration("velocity_limits must satisfy low < up".into()));
        }
        Ok(())
    }

    /// Rotor speed (rad/s) for a load-side velocity.
    pub fn rotor_speed(&self, velocity: T) -> T {
        T::two_pi() * self.gear_ratio * velocity / self.screw_lead
    }

    /// Screw-side torque (N·m) for a screw force.
    pub fn screw_torque(&self, screw_force: T) -> T {
        self.screw_lead * screw_force / (T::two_pi() * self.gear_ratio)
    }
}

/// One actuator as described by its parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct EmlaUnit<T> {
    #[serde(default)]
    pub name: String,
    pub pmsm: PmsmParams<T>,
    pub drivetrain: DrivetrainParams<T>,
}

impl<T: Real> EmlaUnit<T> {
    pub fn validate(&self) -> Result<()> {
        self.pmsm.validate()?;
        self.drivetrain.validate()
    }
}

/// Steady-state electrical and mechanical quantities at one load point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint<T> {
    pub i_d: T,
    pub i_q: T,
    pub v_d: T,
    pub v_q: T,
    pub v_0: T,
    pub motor_torque: T,
    pub screw_torque: T,
    pub rotor_speed: T,
    pub electrical_speed: T,
    pub screw_force: T,
    pub force: T,
    pub velocity: T,
    pub mech_power: T,
    pub elec_power: T,
    pub efficiency: T,
    /// Line-line RMS voltage.
    pub v_ll: T,
    /// Line RMS current.
    pub i_ll: T,
    pub power_factor: T,
    /// Set when both powers vanish and `efficiency` is the floor sentinel.
    pub zero_power: bool,
}

/// Park transformation evaluated at the electrical angle `ω_e t`.
pub fn park_matrix<T: Real>(electrical_angle: T) -> Result<Matrix3<T>> {
    if !electrical_angle.is_finite_val() {
        return Err(Error::Domain("electrical angle must be finite".into()));
    }
    let third = T::two_pi() / T::lit(3.0);
    let a = electrical_angle;
    let half = T::lit(0.5);
    Ok(Matrix3::new(
        a.cos(),
        (a - third).cos(),
        (a + third).cos(),
        -a.sin(),
        -(a - third).sin(),
        -(a + third).sin(),
        half,
        half,
        half,
    ))
}

/// Phase voltages to `(V_d, V_q, V_0)` with the amplitude-invariant 2/3 scaling.
pub fn abc_to_dq<T: Real>(v_abc: Vector3<T>, electrical_angle: T) -> Result<Vector3<T>> {
    if !(v_abc.iter().all(|v| v.is_finite_val())) {
        return Err(Error::Domain("phase voltages must be finite".into()));
    }
    let p = park_matrix(electrical_angle)?;
    Ok(p * v_abc * (T::lit(2.0) / T::lit(3.0)))
}

/// `τ_m = 3/2 · p · i_q · (Φ_PM + (L_d − L_q) i_d)`.
pub fn electromagnetic_torque<T: Real>(i_d: T, i_q: T, params: &PmsmParams<T>) -> T {
    let p = T::from_u32(params.pole_pairs).unwrap_or_else(T::one);
    T::lit(1.5) * p * i_q * (params.pm_flux + (params.inductance_d - params.inductance_q) * i_d)
}

/// Steady-state operating point (zero accelerations, `i_d = 0` control).
pub fn steady_state_operating_point<T: Real>(
    force: T,
    velocity: T,
    pmsm: &PmsmParams<T>,
    drive: &DrivetrainParams<T>,
) -> Result<OperatingPoint<T>> {
    if !force.is_finite_val() || !velocity.is_finite_val() {
        return Err(Error::Domain("load force and velocity must be finite".into()));
    }
    let [f_low, f_up] = drive.force_limits;
    let [v_low, v_up] = drive.velocity_limits;
    if force < f_low || force > f_up {
        return Err(Error::Range(format!(
            "force {} outside [{}, {}]",
            force.as_f64(),
            f_low.as_f64(),
            f_up.as_f64()
        )));
    }
    if velocity < v_low || velocity > v_up {
        return Err(Error::Range(format!(
            "velocity {} outside [{}, {}]",
            velocity.as_f64(),
            v_low.as_f64(),
            v_up.as_f64()
        )));
    }

    let pole_pairs = T::from_u32(pmsm.pole_pairs).unwrap_or_else(T::one);
    let rotor_speed = drive.rotor_speed(velocity);
    let electrical_speed = pole_pairs * rotor_speed;
    let screw_force = force + drive.load_viscous * velocity;
    let screw_torque = drive.screw_torque(screw_force);
    let motor_torque = screw_torque + pmsm.friction_torque(rotor_speed);

    let i_d = T::zero();
    let torque_per_amp = T::lit(1.5) * pole_pairs * pmsm.pm_flux;
    let i_q = motor_torque / torque_per_amp;

    let v_d = pmsm.stator_resistance * i_d - electrical_speed * pmsm.inductance_q * i_q;
    let v_q = pmsm.stator_resistance * i_q + electrical_speed * (pmsm.inductance_d * i_d + pmsm.pm_flux);
    let v_0 = T::zero();

    let mech_power = force * velocity;
    let elec_power = T::lit(1.5) * (v_d * i_d + v_q * i_q);

    let v_mag = (v_d * v_d + v_q * v_q).sqrt();
    let i_mag = (i_d * i_d + i_q * i_q).sqrt();
    let sqrt2 = T::lit(2.0).sqrt();
    let v_ll = T::lit(3.0).sqrt() * v_mag / sqrt2;
    let i_ll = i_mag / sqrt2;
    let apparent = T::lit(1.5) * v_mag * i_mag;
    let power_factor = if apparent > T::zero() {
        elec_power / apparent
    } else {
        T::one()
    };

    let floor = T::lit(ETA_FLOOR);
    let tiny = T::lit(ZERO_POWER);
    let zero_power = mech_power.abs() < tiny && elec_power.abs() < tiny;
    let efficiency = if zero_power {
        floor
    } else if mech_power > tiny {
        if elec_power <= T::zero() {
            return Err(Error::ModelInconsistency(format!(
                "electrical power {} <= 0 while mechanical power {} > 0",
                elec_power.as_f64(),
                mech_power.as_f64()
            )));
        }
        clamp_eta(mech_power / elec_power)
    } else if mech_power < -tiny {
        // generating: electrical and mechanical roles swap
        if elec_power < T::zero() {
            clamp_eta(elec_power / mech_power)
        } else {
            floor
        }
    } else {
        floor
    };

    Ok(OperatingPoint {
        i_d,
        i_q,
        v_d,
        v_q,
        v_0,
        motor_torque,
        screw_torque,
        rotor_speed,
        electrical_speed,
        screw_force,
        force,
        velocity,
        mech_power,
        elec_power,
        efficiency,
        v_ll,
        i_ll,
        power_factor,
        zero_power,
    })
}

fn clamp_eta<T: Real>(eta: T) -> T {
    let floor = T::lit(ETA_FLOOR);
    if eta.is_finite_val() {
        eta.max(floor).min(T::one())
    } else {
        floor
    }
}

/// Efficiency sampled on a force × velocity grid. `values[i][j]` belongs to
/// `force_axis[i]`, `velocity_axis[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyMap<T> {
    pub force_axis: Vec<T>,
    pub velocity_axis: Vec<T>,
    pub values: Vec<Vec<T>>,
}

fn linspace<T: Real>(lo: T, hi: T, n: usize) -> Vec<T> {
    let denom = T::from_usize(n - 1).unwrap_or_else(T::one);
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                lo + (hi - lo) * T::from_usize(i).unwrap_or_else(T::zero) / denom
            }
        })
        .collect()
}

/// Evaluates the steady-state efficiency over the drivetrain limit rectangle.
pub fn build_efficiency_map<T: Real>(
    pmsm: &PmsmParams<T>,
    drive: &DrivetrainParams<T>,
    n_force: usize,
    n_velocity: usize,
) -> Result<EfficiencyMap<T>> {
    if n_force < 2 || n_velocity < 2 {
        return Err(Error::Configuration(
            "efficiency map needs at least 2 nodes per axis".into(),
        ));
    }
    pmsm.validate()?;
    drive.validate()?;
    let force_axis = linspace(drive.force_limits[0], drive.force_limits[1], n_force);
    let velocity_axis = linspace(drive.velocity_limits[0], drive.velocity_limits[1], n_velocity);
    let values = force_axis
        .par_iter()
        .map(|&f| {
            velocity_axis
                .iter()
                .map(|&v| {
                    steady_state_operating_point(f, v, pmsm, drive)
                        .map(|op| op.efficiency)
                        .map_err(|e| Error::MapNode {
                            force: f.as_f64(),
                            velocity: v.as_f64(),
                            source: Box::new(e),
                        })
                })
                .collect::<Result<Vec<T>>>()
        })
        .collect::<Result<Vec<Vec<T>>>>()?;
    Ok(EfficiencyMap {
        force_axis,
        velocity_axis,
        values,
    })
}

/// Index of the cell containing `x` (clamped) and the local coordinate in [0, 1].
fn locate<T: Real>(axis: &[T], x: T) -> (usize, T) {
    let n = axis.len();
    if x <= axis[0] {
        return (0, T::zero());
    }
    if x >= axis[n - 1] {
        return (n - 2, T::one());
    }
    // first index with axis[idx] > x
    let idx = axis.partition_point(|&a| a <= x);
    let i = idx - 1;
    let t = (x - axis[i]) / (axis[i + 1] - axis[i]);
    (i, t)
}

impl<T: Real> EfficiencyMap<T> {
    pub fn validate(&self) -> Result<()> {
        let strictly_increasing = |a: &[T]| a.len() >= 2 && a.windows(2).all(|w| w[0] < w[1]);
        if !strictly_increasing(&self.force_axis) || !strictly_increasing(&self.velocity_axis) {
            return Err(Error::Configuration(
                "efficiency map axes must be strictly increasing".into(),
            ));
        }
        if self.values.len() != self.force_axis.len() || self.values.iter().any(|r| r.len() != self.velocity_axis.len())
        {
            return Err(Error::Configuration("efficiency map shape mismatch".into()));
        }
        let floor = T::lit(ETA_FLOOR);
        if self.values.iter().flatten().any(|&v| !(v >= floor && v <= T::one())) {
            return Err(Error::Configuration(
                "efficiency map values must lie in [eta_floor, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Bilinear interpolation, queries clamped to the grid rectangle.
    pub fn lookup(&self, force: T, velocity: T) -> T {
        let (i, s) = locate(&self.force_axis, force);
        let (j, t) = locate(&self.velocity_axis, velocity);
        let one = T::one();
        let v00 = self.values[i][j];
        let v01 = self.values[i][j + 1];
        let v10 = self.values[i + 1][j];
        let v11 = self.values[i + 1][j + 1];
        let eta = (one - s) * ((one - t) * v00 + t * v01) + s * ((one - t) * v10 + t * v11);
        eta.max(T::lit(ETA_FLOOR)).min(one)
    }
}

/// Free-function form of [`EfficiencyMap::lookup`].
pub fn lookup_efficiency<T: Real>(map: &EfficiencyMap<T>, force: T, velocity: T) -> T {
    map.lookup(force, velocity)
}

/// Writes the map as `v_x,f_x,eta` rows, force-major, 9 significant digits.
pub fn write_map_csv<W: std::io::Write>(map: &EfficiencyMap<f64>, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["v_x", "f_x", "eta"])?;
    for (i, f) in map.force_axis.iter().enumerate() {
        for (j, v) in map.velocity_axis.iter().enumerate() {
            w.write_record([
                format!("{v:.8e}"),
                format!("{f:.8e}"),
                format!("{:.8e}", map.values[i][j]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
