//! Invariant suite behind `emla validate`.

use emla_core::closed_chain::{actuator_from_angle, inner_angles, k_coefficients};
use emla_core::emla::ETA_FLOOR;
use emla_core::io::write_json;
use emla_core::scalar::wrap_angle;
use emla_core::scenario::Scenario;
use emla_core::{ClosedChainParams, Result};
use serde::{Deserialize, Serialize};

use crate::commands::prepare;
use crate::{Failure, RunArgs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub scenario: String,
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn from_result(name: &str, r: Result<String>) -> Check {
    match r {
        Ok(detail) => Check {
            name: name.into(),
            passed: true,
            detail,
        },
        Err(e) => Check {
            name: name.into(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn bounded(name: &str, worst: f64, tol: f64) -> Check {
    Check {
        name: name.into(),
        passed: worst <= tol,
        detail: format!("worst {worst:.3e} (tolerance {tol:.0e})"),
    }
}

/// Worst triangle, round-trip, FD and k-sum errors over the chain's stroke.
fn chain_errors(c: &ClosedChainParams) -> Result<[f64; 4]> {
    let mut worst = [0.0_f64; 4];
    let h = 1e-6;
    for i in 0..=100 {
        let x = c.lc * (0.02 + 0.96 * i as f64 / 100.0);
        let a = inner_angles(c, x)?;
        worst[0] = worst[0].max(a.triangle_residual().abs());
        let back = actuator_from_angle(c, wrap_angle(a.q + c.psi))?;
        worst[1] = worst[1].max((back - x).abs());
        let k = k_coefficients(c, x)?;
        let fd = (inner_angles(c, x + h)?.q - inner_angles(c, x - h)?.q) / (2.0 * h);
        worst[2] = worst[2].max((fd - k[0]).abs() / k[0].abs().max(1.0));
        worst[3] = worst[3].max((k[0] + k[1] + k[2]).abs());
    }
    Ok(worst)
}

fn scenario_checks(s: &Scenario, checks: &mut Vec<Check>) -> Result<()> {
    let p = &s.problem;
    let robot = &p.robot;
    let mut worst = [0.0_f64; 4];
    for c in robot.chains() {
        let w = chain_errors(&c)?;
        for i in 0..4 {
            worst[i] = worst[i].max(w[i]);
        }
    }
    checks.push(bounded("chain triangle closure", worst[0], 1e-10));
    checks.push(bounded("chain stroke/angle round trip", worst[1], 1e-9));
    checks.push(bounded("chain k1 against finite differences", worst[2], 1e-6));
    checks.push(bounded("chain k1 + k2 + k3", worst[3], 1e-9));

    let mut unity = 0.0_f64;
    for k in 0..p.basis.grid.len() {
        let row = p.basis.row_at(p.basis.grid.time(k))?;
        unity = unity.max((row.value.iter().sum::<f64>() - 1.0).abs());
    }
    checks.push(bounded("spline partition of unity", unity, 1e-12));

    let (_, c) = p.layout.split(&s.z0);
    let n = robot.n_dof();
    let mut jac = 0.0_f64;
    let mut power = 0.0_f64;
    let h = 1e-6;
    let dof_actuator = robot.actuator_of_dof();
    for k in 0..p.basis.grid.len() {
        let js = p.basis.evaluate_at(k, c, n)?;
        let j = robot.tcp_jacobian(&js.theta)?;
        for col in 0..n {
            let mut plus = js.theta.clone();
            let mut minus = js.theta.clone();
            plus[col] += h;
            minus[col] -= h;
            let a = robot.tcp_pose_unchecked(&plus);
            let b = robot.tcp_pose_unchecked(&minus);
            let fd = [
                (a.position.x - b.position.x) / (2.0 * h),
                (a.position.y - b.position.y) / (2.0 * h),
                wrap_angle(a.orientation - b.orientation) / (2.0 * h),
            ];
            for (row, v) in fd.iter().enumerate() {
                jac = jac.max((v - j[(row, col)]).abs() / j[(row, col)].abs().max(1.0));
            }
        }
        let loads = robot.inverse_dynamics(&js.theta, &js.theta_dot, &js.theta_ddot)?;
        let joint: f64 = loads.torque.iter().zip(js.theta_dot.iter()).map(|(t, w)| t * w).sum();
        let act: f64 = dof_actuator.iter().map(|&a| loads.force[a] * loads.velocity[a]).sum();
        let scale: f64 = loads
            .torque
            .iter()
            .zip(js.theta_dot.iter())
            .map(|(t, w)| (t * w).abs())
            .sum::<f64>()
            .max(1.0);
        power = power.max((joint - act).abs() / scale);
    }
    checks.push(bounded("TCP Jacobian against finite differences", jac, 1e-6));
    checks.push(bounded("actuator power equals joint power", power, 1e-9));

    let eval = p.evaluate(&s.z0)?;
    checks.push(Check {
        name: "initial design evaluates along the trajectory".into(),
        passed: !eval.penalized,
        detail: format!("objective {:.6e}", eval.objective),
    });
    checks.push(bounded(
        "initial tracking residual",
        eval.constraints.max_equality(),
        1e-6,
    ));
    checks.push(bounded(
        "initial bound violation",
        eval.constraints.max_inequality_violation(),
        1e-6,
    ));
    Ok(())
}

pub fn run(args: &RunArgs) -> std::result::Result<(), Failure> {
    let inputs = prepare(args)?;
    let mut checks = Vec::new();
    checks.push(from_result(
        "robot description",
        inputs
            .robot
            .validate()
            .map(|_| format!("{} joints", inputs.robot.joints.len())),
    ));
    checks.push(from_result(
        "EMLA parameters",
        inputs
            .units
            .iter()
            .try_for_each(|u| u.validate())
            .map(|_| format!("{} units", inputs.units.len())),
    ));
    match inputs.build() {
        Err(e) => checks.push(from_result("scenario build", Err(e))),
        Ok(s) => {
            checks.push(Check {
                name: "scenario build".into(),
                passed: true,
                detail: format!("reference deviation {:.3e} m", s.projection.max_path_deviation),
            });
            let mut eta = (f64::INFINITY, f64::NEG_INFINITY);
            for map in &s.problem.maps {
                for v in map.values.iter().flatten() {
                    eta = (eta.0.min(*v), eta.1.max(*v));
                }
            }
            checks.push(Check {
                name: "efficiency map range".into(),
                passed: eta.0 >= ETA_FLOOR && eta.1 <= 1.0,
                detail: format!("eta in [{:.4}, {:.4}]", eta.0, eta.1),
            });
            if let Err(e) = scenario_checks(&s, &mut checks) {
                checks.push(from_result("scenario invariants", Err(e)));
            }
        }
    }
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let report = ValidationReport {
        scenario: inputs.spec.name.clone(),
        passed: checks.iter().all(|c| c.passed),
        checks,
    };
    write_json(&args.out.join("validation.json"), &report)?;
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Validation(
            report
                .checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| format!("{}: {}", c.name, c.detail))
                .collect(),
        ))
    }
}
