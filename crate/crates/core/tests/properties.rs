use std::f64::consts::PI;
use std::path::Path;
use std::sync::OnceLock;

use emla_core::closed_chain::{
    actuator_from_angle, chain_accelerations, chain_rates, inner_angles, k_coefficients, Mounting,
};
use emla_core::emla::{
    build_efficiency_map, electromagnetic_torque, park_matrix, steady_state_operating_point, ETA_FLOOR, ZERO_POWER,
};
use emla_core::io::{load_scenario, read_json};
use emla_core::nlp::power_cost;
use emla_core::scalar::wrap_angle;
use emla_core::scenario::{generate_spiral, quintic, Scenario, SpiralSpec};
use emla_core::spline::{build_basis, CollocationGrid};
use emla_core::{ClosedChainParams, DrivetrainParams, EfficiencyMap, EmlaUnit, PmsmParams, RobotModel};
use nalgebra::{DVector, Matrix2};
use proptest::prelude::*;

fn scenarios() -> &'static Path {
    static DIR: OnceLock<std::path::PathBuf> = OnceLock::new();
    DIR.get_or_init(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios"))
}

fn unit() -> &'static EmlaUnit {
    static U: OnceLock<EmlaUnit> = OnceLock::new();
    U.get_or_init(|| read_json(&scenarios().join("emla_boom.json")).unwrap())
}

fn map() -> &'static EfficiencyMap {
    static M: OnceLock<EfficiencyMap> = OnceLock::new();
    M.get_or_init(|| build_efficiency_map(&unit().pmsm, &unit().drivetrain, 21, 17).unwrap())
}

fn robot() -> &'static RobotModel {
    static R: OnceLock<RobotModel> = OnceLock::new();
    R.get_or_init(|| read_json(&scenarios().join("robot.json")).unwrap())
}

fn desk() -> &'static Scenario {
    static S: OnceLock<Scenario> = OnceLock::new();
    S.get_or_init(|| load_scenario(&scenarios().join("desk.json")).unwrap())
}

fn pmsm() -> &'static PmsmParams {
    &unit().pmsm
}

fn drive() -> &'static DrivetrainParams {
    &unit().drivetrain
}

/// Chain parameters that satisfy the full-stroke triangle conditions.
fn feasible_chain() -> impl Strategy<Value = ClosedChainParams> {
    (0.5..3.0_f64, 0.5..3.0_f64, 0.2..2.0_f64, 0.1..1.0_f64, -PI..PI, -PI..PI)
        .prop_map(|(l, l1, lc, lc0, a, b)| {
            ClosedChainParams::from_mounting(
                l,
                l1,
                lc,
                lc0,
                Mounting {
                    base_angle: a,
                    rod_angle: b,
                },
            )
        })
        .prop_filter("triangle must close over the stroke", |c| c.validate().is_ok())
}

fn joint_config() -> impl Strategy<Value = DVector<f64>> {
    let limits = robot().joint_limits().unwrap();
    let ranges: Vec<_> = limits.iter().map(|l| (l[0] + 1e-3)..(l[1] - 1e-3)).collect();
    ranges.prop_map(DVector::from_vec)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn chain_triangle_and_k_identities(c in feasible_chain(), frac in 0.0..=1.0_f64) {
        let x = frac * c.lc;
        if let (Ok(a), Ok(k)) = (inner_angles(&c, x), k_coefficients(&c, x)) {
            prop_assert!(a.triangle_residual().abs() < 1e-10);
            for q in a.as_array() {
                prop_assert!(q > -PI && q < 0.0);
            }
            prop_assert!((k[0] + k[1] + k[2]).abs() < 1e-9);
            let back = actuator_from_angle(&c, wrap_angle(a.q + c.psi)).unwrap();
            prop_assert!((back - x).abs() < 1e-9);
        }
    }

    #[test]
    fn chain_rates_sum_to_zero(c in feasible_chain(), frac in 0.05..0.95_f64, xd in -1.0..1.0_f64, xdd in -1.0..1.0_f64) {
        let x = frac * c.lc;
        if let (Ok(r), Ok(a)) = (chain_rates(&c, x, xd), chain_accelerations(&c, x, xd, xdd)) {
            let scale = r.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            prop_assert!((r[0] + r[1] + r[2]).abs() < 1e-9 * scale);
            let scale = a.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            prop_assert!((a[0] + a[1] + a[2]).abs() < 1e-9 * scale);
        }
    }

    #[test]
    fn motoring_points_lose_power(f in -80e3..80e3_f64, v in -0.5..0.5_f64) {
        let op = steady_state_operating_point(f, v, pmsm(), drive()).unwrap();
        prop_assert!(op.efficiency >= ETA_FLOOR && op.efficiency <= 1.0);
        if op.mech_power > ZERO_POWER {
            prop_assert!(op.elec_power >= op.mech_power);
        }
    }

    #[test]
    fn efficiency_symmetric_under_sign_flip(f in 1e3..80e3_f64, v in 0.01..0.5_f64) {
        let a = steady_state_operating_point(f, v, pmsm(), drive()).unwrap();
        let b = steady_state_operating_point(-f, -v, pmsm(), drive()).unwrap();
        prop_assert!((a.efficiency - b.efficiency).abs() < 1e-12);
    }

    #[test]
    fn torque_linear_in_iq(i_d in -5.0..5.0_f64, a in -50.0..50.0_f64, b in -50.0..50.0_f64, s in -3.0..3.0_f64) {
        let t = |iq: f64| electromagnetic_torque(i_d, iq, pmsm());
        let lhs = t(a + s * b) - t(0.0);
        let rhs = (t(a) - t(0.0)) + s * (t(b) - t(0.0));
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn park_rows_are_orthogonal(angle in -20.0..20.0_f64) {
        let p = park_matrix(angle).unwrap();
        let rows = p.fixed_rows::<2>(0);
        let g = rows * rows.transpose();
        prop_assert!((g - Matrix2::identity() * 1.5).amax() < 1e-12);
    }

    #[test]
    fn map_lookup_is_bounded_and_exact_at_nodes(i in 0usize..21, j in 0usize..17, f in -1e5..1e5_f64, v in -1.0..1.0_f64) {
        let m = map();
        prop_assert_eq!(m.lookup(m.force_axis[i], m.velocity_axis[j]), m.values[i][j]);
        let eta = m.lookup(f, v);
        prop_assert!((ETA_FLOOR..=1.0).contains(&eta));
    }

    #[test]
    fn spline_rows_partition_unity(t in 0.0..=6.0_f64, n_ctrl in 4usize..25) {
        let grid = CollocationGrid::new(0.0, 0.5, 12).unwrap();
        let basis = build_basis(3, n_ctrl, &grid).unwrap();
        let row = basis.row_at(t).unwrap();
        prop_assert!((row.value.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let s1: f64 = row.d1.iter().sum();
        let s2: f64 = row.d2.iter().sum();
        let scale = row.d2.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        prop_assert!(s1.abs() < 1e-12 * scale && s2.abs() < 1e-12 * scale);
    }

    #[test]
    fn spline_is_local(n_ctrl in 6usize..20, pick in 0usize..100, bump in 0.1..2.0_f64) {
        let grid = CollocationGrid::new(0.0, 0.25, 24).unwrap();
        let basis = build_basis(3, n_ctrl, &grid).unwrap();
        let i = pick % n_ctrl;
        let c = vec![0.0; n_ctrl];
        let mut d = c.clone();
        d[i] = bump;
        let (lo, hi) = (basis.knots[i], basis.knots[i + 4]);
        for k in 0..grid.len() {
            let t = grid.time(k);
            let a = basis.evaluate(&c, 1, t).unwrap().theta[0];
            let b = basis.evaluate(&d, 1, t).unwrap().theta[0];
            if t < lo || t > hi {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn spline_is_linear(a in prop::collection::vec(-2.0..2.0_f64, 10), b in prop::collection::vec(-2.0..2.0_f64, 10), s in -2.0..2.0_f64, t in 0.0..=6.0_f64) {
        let grid = CollocationGrid::new(0.0, 0.5, 12).unwrap();
        let basis = build_basis(3, 10, &grid).unwrap();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
        let ea = basis.evaluate(&a, 1, t).unwrap();
        let eb = basis.evaluate(&b, 1, t).unwrap();
        let em = basis.evaluate(&mix, 1, t).unwrap();
        let want = ea.theta_ddot[0] + s * eb.theta_ddot[0];
        prop_assert!((em.theta_ddot[0] - want).abs() < 1e-9 * (1.0 + want.abs()));
        let want = ea.theta[0] + s * eb.theta[0];
        prop_assert!((em.theta[0] - want).abs() < 1e-12 * (1.0 + want.abs()));
    }

    #[test]
    fn inverse_dynamics_is_affine_in_acceleration(theta in joint_config(), rates in prop::collection::vec(-0.5..0.5_f64, 3), a in prop::collection::vec(-1.0..1.0_f64, 3), s in -2.0..2.0_f64) {
        let r = robot();
        let qd = DVector::from_vec(rates);
        let acc = DVector::from_vec(a);
        let t0 = r.inverse_dynamics(&theta, &qd, &DVector::zeros(3)).unwrap().torque;
        let t1 = r.inverse_dynamics(&theta, &qd, &acc).unwrap().torque;
        let ts = r.inverse_dynamics(&theta, &qd, &(&acc * s)).unwrap().torque;
        let want = &t0 + (&t1 - &t0) * s;
        prop_assert!((&ts - &want).amax() < 1e-8 * (1.0 + want.amax()));
    }

    #[test]
    fn mass_matrix_is_spd(theta in joint_config()) {
        let m = robot().mass_matrix(&theta).unwrap();
        prop_assert!((&m - m.transpose()).amax() < 1e-9 * m.amax());
        prop_assert!(m.clone().cholesky().is_some());
    }

    #[test]
    fn actuator_power_is_joint_power(theta in joint_config(), rates in prop::collection::vec(-0.5..0.5_f64, 3), a in prop::collection::vec(-1.0..1.0_f64, 3)) {
        let r = robot();
        let qd = DVector::from_vec(rates);
        let loads = r.inverse_dynamics(&theta, &qd, &DVector::from_vec(a)).unwrap();
        for (j, &act) in r.actuator_of_dof().iter().enumerate() {
            let joint = loads.torque[j] * qd[j];
            let p = loads.force[act] * loads.velocity[act];
            prop_assert!((p - joint).abs() <= 1e-9 * joint.abs().max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn jacobian_matches_pose_differences(theta in joint_config()) {
        let r = robot();
        let j = r.tcp_jacobian(&theta).unwrap();
        let h = 1e-6;
        for col in 0..3 {
            let mut p = theta.clone();
            let mut m = theta.clone();
            p[col] += h;
            m[col] -= h;
            let (a, b) = (r.tcp_pose_unchecked(&p), r.tcp_pose_unchecked(&m));
            let fd = [(a.position.x - b.position.x) / (2.0 * h), (a.position.y - b.position.y) / (2.0 * h)];
            for row in 0..2 {
                prop_assert!((fd[row] - j[(row, col)]).abs() < 1e-6 * j.amax().max(1.0));
            }
        }
    }

    #[test]
    fn power_cost_ignores_point_order(mut totals in prop::collection::vec(-5e4..5e4_f64, 2..40), seed in any::<u64>()) {
        let before = power_cost(0.25, &totals);
        let n = totals.len();
        totals.rotate_left((seed % n as u64) as usize);
        totals.reverse();
        let after = power_cost(0.25, &totals);
        prop_assert!((before - after).abs() <= 1e-12 * before.max(1.0));
        prop_assert!(before >= 0.0);
    }

    #[test]
    fn objective_is_nonnegative_near_the_initial_design(dz in prop::collection::vec(-0.02..0.02_f64, 30)) {
        let s = desk();
        let z: Vec<f64> = s.z0.iter().zip(&dz).map(|(a, b)| a + b).collect();
        let e = s.problem.evaluate(&z).unwrap();
        prop_assert!(e.objective >= 0.0);
        prop_assert!(e.objective.is_finite());
    }

    #[test]
    fn spiral_endpoints_rest_and_radius_grows(r0 in 0.0..1.0_f64, b in 0.0..0.5_f64, span in 0.5..12.0_f64, dur in 1.0..10.0_f64) {
        let spec = SpiralSpec {
            center: [5.0, 0.0],
            start_radius: r0,
            growth_per_revolution: b,
            start_angle: 0.3,
            angular_span: span,
            duration: dur,
            telescope: None,
        };
        let s = generate_spiral(&spec, 0.0, &[0.0, dur]).unwrap();
        prop_assert_eq!(s.velocity[0], [0.0, 0.0]);
        prop_assert_eq!(s.velocity[1], [0.0, 0.0]);
        let r_end = ((s.position[1][0] - 5.0).powi(2) + s.position[1][1].powi(2)).sqrt();
        prop_assert!((r_end - (r0 + b * span / (2.0 * PI))).abs() < 1e-9);
    }

    #[test]
    fn quintic_is_monotone(a in 0.0..1.0_f64, b in 0.0..1.0_f64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(quintic(lo).0 <= quintic(hi).0);
        prop_assert!((0.0..=1.0).contains(&quintic(a).0));
    }
}

#[test]
fn emitted_json_round_trips() {
    let s = desk();
    let text = serde_json::to_string(&s.spec).unwrap();
    let back: emla_core::scenario::ScenarioSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, s.spec);
    let text = serde_json::to_string(robot()).unwrap();
    let back: RobotModel = serde_json::from_str(&text).unwrap();
    assert_eq!(&back, robot());
    let e = s.problem.evaluate(&s.z0).unwrap();
    let text = serde_json::to_string(&e.points).unwrap();
    let back: Vec<emla_core::nlp::PointRecord> = serde_json::from_str(&text).unwrap();
    assert_eq!(back, e.points);
}
