use std::fs;
use std::path::Path;

use emla_core::emla::build_efficiency_map;
use emla_core::io::{
    load_inputs, write_json, write_map_file, write_series_csv, write_trace_csv, RunArtifacts, RunLog, ScenarioInputs,
};
use emla_core::nlp::{optimize as run_solver, plain_energy, PointRecord};
use emla_core::scenario::Scenario;
use emla_core::{EfficiencyMap, Error, Result};
use serde::{Deserialize, Serialize};

use crate::{Failure, RunArgs};

/// Loads the scenario, applies command-line overrides and creates the output directory.
pub fn prepare(args: &RunArgs) -> Result<ScenarioInputs> {
    let mut inputs = load_inputs(&args.scenario)?;
    if let Some(seed) = args.seed {
        inputs.spec.solver.seed = seed;
    }
    if let Some(n) = args.max_iter {
        inputs.spec.solver.max_iterations = n;
    }
    fs::create_dir_all(&args.out).map_err(|source| Error::Io {
        path: args.out.display().to_string(),
        source,
    })?;
    Ok(inputs)
}

fn build_maps(inputs: &ScenarioInputs) -> Result<Vec<EfficiencyMap>> {
    let g = inputs.spec.map_grid;
    inputs
        .units
        .iter()
        .map(|u| build_efficiency_map(&u.pmsm, &u.drivetrain, g.force_nodes, g.velocity_nodes))
        .collect()
}

fn export_maps(out: &Path, maps: &[EfficiencyMap], log: &mut RunLog) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for (i, map) in maps.iter().enumerate() {
        let name = format!("effmap_{i}.csv");
        write_map_file(&out.join(&name), map)?;
        log.line(format!(
            "map {i}: {} x {} nodes -> {name}",
            map.force_axis.len(),
            map.velocity_axis.len()
        ));
        names.push(name);
    }
    Ok(names)
}

fn finish(out: &Path, artifacts: &RunArtifacts, log: &RunLog) -> Result<()> {
    log.write(&out.join(&artifacts.log))?;
    write_json(&out.join("artifacts.json"), artifacts)?;
    artifacts.verify(out)
}

pub fn effmap(args: &RunArgs) -> std::result::Result<(), Failure> {
    let inputs = prepare(args)?;
    let mut log = RunLog::default();
    log.line(format!("scenario {}", inputs.spec.name));
    for u in &inputs.units {
        u.validate()?;
    }
    let maps = build_maps(&inputs)?;
    let artifacts = RunArtifacts {
        result: None,
        series: Vec::new(),
        maps: export_maps(&args.out, &maps, &mut log)?,
        log: "run.log".into(),
    };
    finish(&args.out, &artifacts, &log)?;
    Ok(())
}

fn peaks(series: &[PointRecord], pick: impl Fn(&PointRecord) -> &Vec<f64>) -> Vec<f64> {
    let n = series.first().map_or(0, |r| pick(r).len());
    (0..n)
        .map(|i| series.iter().fold(0.0_f64, |m, r| m.max(pick(r)[i].abs())))
        .collect()
}

/// Output of `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenario: String,
    pub xi: Vec<f64>,
    pub c: Vec<f64>,
    pub objective: f64,
    pub plain_energy: f64,
    pub max_equality_residual: f64,
    pub max_inequality_violation: f64,
    pub max_structural_residual: f64,
    pub peak_force: Vec<f64>,
    pub peak_velocity: Vec<f64>,
    /// Largest distance between the spline-realizable reference and the analytic spiral.
    pub reference_deviation: f64,
    pub fit_rms: f64,
    pub series: Vec<PointRecord>,
}

fn build(inputs: &ScenarioInputs, log: &mut RunLog) -> Result<Scenario> {
    let s = inputs.build()?;
    log.line(format!("scenario {}", s.spec.name));
    log.line(format!(
        "variables {} equalities {} inequalities {}",
        s.problem.n_vars(),
        s.problem.n_equality(),
        s.problem.n_inequality()
    ));
    log.line(format!(
        "reference deviation {:.6e} m, fit rms {:.6e}",
        s.projection.max_path_deviation, s.projection.fit_rms
    ));
    Ok(s)
}

pub fn simulate(args: &RunArgs) -> std::result::Result<(), Failure> {
    let inputs = prepare(args)?;
    let mut log = RunLog::default();
    let s = build(&inputs, &mut log)?;
    let eval = s.problem.evaluate(&s.z0)?;
    if eval.penalized {
        return Err(Error::GeometryInfeasible("initial design cannot be evaluated along the trajectory".into()).into());
    }
    let (xi, c) = s.problem.layout.split(&s.z0);
    let report = SimulationReport {
        scenario: s.spec.name.clone(),
        xi: xi.to_vec(),
        c: c.to_vec(),
        objective: eval.objective,
        plain_energy: plain_energy(s.spec.grid.dt, &eval.points),
        max_equality_residual: eval.constraints.max_equality(),
        max_inequality_violation: eval.constraints.max_inequality_violation(),
        max_structural_residual: eval.constraints.max_structural(),
        peak_force: peaks(&eval.points, |r| &r.force),
        peak_velocity: peaks(&eval.points, |r| &r.velocity),
        reference_deviation: s.projection.max_path_deviation,
        fit_rms: s.projection.fit_rms,
        series: eval.points,
    };
    log.line(format!("objective {:.9e}", report.objective));
    log.line(format!("plain energy {:.9e} J", report.plain_energy));
    write_json(&args.out.join("simulation.json"), &report)?;
    write_series_csv(&args.out.join("series.csv"), &report.series)?;
    let artifacts = RunArtifacts {
        result: Some("simulation.json".into()),
        series: vec!["series.csv".into()],
        maps: Vec::new(),
        log: "run.log".into(),
    };
    finish(&args.out, &artifacts, &log)?;
    Ok(())
}

pub fn optimize(args: &RunArgs) -> std::result::Result<(), Failure> {
    let inputs = prepare(args)?;
    let mut log = RunLog::default();
    let s = build(&inputs, &mut log)?;
    let result = run_solver(&s.problem, &s.z0, &s.spec.solver)?;
    log.line(format!(
        "status {:?} after {} iterations ({} accepted)",
        result.status, result.iterations, result.accepted_steps
    ));
    log.line(format!(
        "objective {:.9e} -> {:.9e}",
        result.objective_initial, result.objective_final
    ));
    log.line(format!(
        "plain energy {:.9e} -> {:.9e} J",
        result.energy.plain_energy_initial, result.energy.plain_energy_final
    ));
    for row in &result.energy.lengths {
        log.line(format!(
            "chain {} {}: {:.6} -> {:.6}",
            row.chain, row.name, row.initial, row.final_value
        ));
    }
    log.line(format!(
        "max equality {:.3e}, max inequality violation {:.3e}, structural {:.3e}",
        result.max_equality_residual, result.max_inequality_violation, result.max_structural_residual
    ));
    let out = &args.out;
    write_json(&out.join("result.json"), &result)?;
    write_json(&out.join("timing.json"), &result.stats)?;
    write_series_csv(&out.join("series_initial.csv"), &result.series_initial)?;
    write_series_csv(&out.join("series_final.csv"), &result.series_final)?;
    write_trace_csv(&out.join("trace.csv"), &result)?;
    let artifacts = RunArtifacts {
        result: Some("result.json".into()),
        series: vec![
            "series_initial.csv".into(),
            "series_final.csv".into(),
            "trace.csv".into(),
        ],
        maps: export_maps(out, &s.problem.maps, &mut log)?,
        log: "run.log".into(),
    };
    finish(out, &artifacts, &log)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peaks_take_absolute_values() {
        let rec = |f: f64| PointRecord {
            t: 0.0,
            theta: vec![],
            theta_dot: vec![],
            theta_ddot: vec![],
            tcp: [0.0; 2],
            reference: [0.0; 2],
            stroke: vec![0.0],
            force: vec![f],
            velocity: vec![0.0],
            mech_power: vec![0.0],
            efficiency: vec![1.0],
            input_power: vec![0.0],
            valid: true,
        };
        assert_eq!(peaks(&[rec(3.0), rec(-5.0), rec(1.0)], |r| &r.force), vec![5.0]);
        assert!(peaks(&[], |r| &r.force).is_empty());
    }
}
