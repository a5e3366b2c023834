use serde::{Deserialize, Serialize};

use super::{Evaluation, PointRecord, Problem};
use crate::error::Result;

/// Trapezoidal integral of samples `y` spaced `dt` apart.
pub fn trapezoid(dt: f64, y: &[f64]) -> f64 {
    match y.len() {
        0 | 1 => 0.0,
        n => dt * (0.5 * (y[0] + y[n - 1]) + y[1..n - 1].iter().sum::<f64>()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    pub chain: usize,
    pub name: String,
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_value: f64,
}

/// Backbone points and chain triangles at the first grid time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub backbone: Vec<[f64; 2]>,
    /// `[pivot, actuator base, rod attachment]` per chain.
    pub triangles: Vec<[[f64; 2]; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub cost_initial: f64,
    pub cost_final: f64,
    /// `∫ Σ_i |P_in,i| dt` in joules.
    pub plain_energy_initial: f64,
    pub plain_energy_final: f64,
    pub peak_force_initial: Vec<f64>,
    pub peak_force_final: Vec<f64>,
    pub peak_velocity_initial: Vec<f64>,
    pub peak_velocity_final: Vec<f64>,
    pub lengths: Vec<LengthRow>,
    pub structure_initial: Structure,
    pub structure_final: Structure,
}

/// `∫ Σ_i |P_in,i| dt` over the series.
pub fn plain_energy(dt: f64, series: &[PointRecord]) -> f64 {
    let abs_power: Vec<f64> = series
        .iter()
        .map(|r| r.input_power.iter().map(|p| p.abs()).sum())
        .collect();
    trapezoid(dt, &abs_power)
}

fn peaks(series: &[PointRecord], pick: impl Fn(&PointRecord) -> &Vec<f64>) -> Vec<f64> {
    let n = series.first().map_or(0, |r| pick(r).len());
    (0..n)
        .map(|i| series.iter().fold(0.0_f64, |m, r| m.max(pick(r)[i].abs())))
        .collect()
}

fn structure(problem: &Problem, z: &[f64]) -> Result<Structure> {
    let (xi, c) = problem.layout.split(z);
    let robot = problem.robot.with_xi(xi)?;
    let theta = problem.basis.evaluate_at(0, c, robot.n_dof())?.theta;
    let (pts, tris) = robot.structure_polyline(&theta);
    Ok(Structure {
        backbone: pts.iter().map(|p| [p.x, p.y]).collect(),
        triangles: tris.iter().map(|t| t.map(|p| [p.x, p.y])).collect(),
    })
}

/// Initial versus final energy figures, peaks, lengths and plotting geometry.
pub fn energy_report(
    problem: &Problem,
    z_initial: &[f64],
    z_final: &[f64],
    initial: &Evaluation,
    fin: &Evaluation,
) -> Result<EnergyReport> {
    let dt = problem.basis.grid.dt;
    let (xi0, _) = problem.layout.split(z_initial);
    let (xi1, _) = problem.layout.split(z_final);
    let names = ["L", "Lc0", "Lc"];
    let lengths = xi0
        .iter()
        .zip(xi1)
        .enumerate()
        .map(|(i, (a, b))| LengthRow {
            chain: i / 3,
            name: names[i % 3].to_string(),
            initial: *a,
            final_value: *b,
        })
        .collect();
    Ok(EnergyReport {
        cost_initial: initial.objective,
        cost_final: fin.objective,
        plain_energy_initial: plain_energy(dt, &initial.points),
        plain_energy_final: plain_energy(dt, &fin.points),
        peak_force_initial: peaks(&initial.points, |r| &r.force),
        peak_force_final: peaks(&fin.points, |r| &r.force),
        peak_velocity_initial: peaks(&initial.points, |r| &r.velocity),
        peak_velocity_final: peaks(&fin.points, |r| &r.velocity),
        lengths,
        structure_initial: structure(problem, z_initial)?,
        structure_final: structure(problem, z_final)?,
    })
}
