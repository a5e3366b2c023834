//! Line-search SQP with an elastic ℓ1 QP subproblem.
//!
//! Each iteration solves
//!
//! ```text
//! min ½ dᵀBd + ∇Fᵀd + μ Σ(u + w) + μ Σ v
//! s.t. A d + h = u - w,  C d + g ≤ v,  u, w, v ≥ 0,  lb ≤ z + d ≤ ub,  |d| ≤ Δ
//! ```
//!
//! with a damped BFGS `B`, then backtracks on the ℓ1 merit
//! `φ = F + μ (‖h‖₁ + ‖g⁺‖₁)`. Derivatives are central finite differences,
//! evaluated in parallel and collected in index order.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus as QpStatus, ZeroConeT,
};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values of a smooth NLP at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct NlpPoint {
    pub objective: f64,
    pub equality: Vec<f64>,
    /// `g(z) ≤ 0`.
    pub inequality: Vec<f64>,
    /// The evaluator fell back to a penalty value.
    pub penalized: bool,
}

/// A problem the SQP can drive.
pub trait Nlp: Sync {
    fn n_vars(&self) -> usize;
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn evaluate(&self, z: &[f64]) -> NlpPoint;
    /// Row scaling applied to the inequalities inside the solver.
    fn inequality_scale(&self) -> Vec<f64> {
        vec![1.0; self.evaluate(&vec![0.0; self.n_vars()]).inequality.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub feasibility_tolerance: f64,
    pub optimality_tolerance: f64,
    /// Relative central-difference step.
    pub fd_step: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    /// Box on each step component.
    pub max_step: f64,
    pub armijo: f64,
    pub min_step_fraction: f64,
    /// Unused by the deterministic solver; kept for multistart drivers.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            feasibility_tolerance: 1e-6,
            optimality_tolerance: 1e-6,
            fd_step: 1e-6,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e10,
            max_step: 0.25,
            armijo: 1e-4,
            min_step_fraction: 1e-8,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feasibility_tolerance", self.feasibility_tolerance),
            ("optimality_tolerance", self.optimality_tolerance),
            ("fd_step", self.fd_step),
            ("initial_penalty", self.initial_penalty),
            ("max_step", self.max_step),
            ("armijo", self.armijo),
            ("min_step_fraction", self.min_step_fraction),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Configuration(format!("solver setting {name} must be > 0")));
            }
        }
        if !(self.penalty_growth > 1.0) || !(self.max_penalty >= self.initial_penalty) {
            return Err(Error::Configuration(
                "penalty growth must exceed 1 and the cap must exceed the start".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    MaxIterations,
    /// The line search could not make progress from a fresh Hessian.
    Stalled,
}

/// One accepted (or final) iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub merit: f64,
    pub violation: f64,
    pub penalty: f64,
    pub step_length: f64,
    pub step_norm: f64,
    pub predicted_reduction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOutcome {
    pub z: Vec<f64>,
    pub status: SolverStatus,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub evaluations: usize,
    /// Raw objective at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
    pub merit_trace: Vec<f64>,
    pub best_merit_trace: Vec<f64>,
    /// Raw max constraint violation, aligned with `objective_trace`.
    pub violation_trace: Vec<f64>,
    pub log: Vec<IterationRecord>,
}

struct Scaled {
    f: f64,
    h: Vec<f64>,
    g: Vec<f64>,
    raw_violation: f64,
    penalized: bool,
    raw_objective: f64,
}

struct Derivatives {
    grad: DVector<f64>,
    a: DMatrix<f64>,
    c: DMatrix<f64>,
}

fn scale_point(p: &NlpPoint, f_scale: f64, g_scale: &[f64]) -> Scaled {
    let raw_eq = p.equality.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let raw_in = p.inequality.iter().fold(0.0_f64, |m, v| m.max(*v));
    Scaled {
        f: p.objective * f_scale,
        h: p.equality.clone(),
        g: p.inequality.iter().zip(g_scale).map(|(g, s)| g * s).collect(),
        raw_violation: raw_eq.max(raw_in),
        penalized: p.penalized,
        raw_objective: p.objective,
    }
}

fn l1_violation(s: &Scaled) -> f64 {
    s.h.iter().map(|v| v.abs()).sum::<f64>() + s.g.iter().map(|v| v.max(0.0)).sum::<f64>()
}

fn merit(s: &Scaled, mu: f64) -> f64 {
    s.f + mu * l1_violation(s)
}

fn fd_derivatives<N: Nlp + ?Sized>(
    nlp: &N,
    z: &[f64],
    base: &NlpPoint,
    step: f64,
    f_scale: f64,
    g_scale: &[f64],
) -> Derivatives {
    let n = z.len();
    let (lo, hi) = nlp.bounds();
    let columns: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let h = step * z[i].abs().max(1.0);
            // stay inside the variable box
            let up = (z[i] + h).min(hi[i]);
            let dn = (z[i] - h).max(lo[i]);
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[i] = up;
            zm[i] = dn;
            let pp = nlp.evaluate(&zp);
            let pm = nlp.evaluate(&zm);
            let (a, b, width) = match (pp.penalized, pm.penalized) {
                (false, false) => (pp, pm, up - dn),
                (false, true) => (pp, base.clone(), up - z[i]),
                (true, false) => (base.clone(), pm, z[i] - dn),
                (true, true) => (base.clone(), base.clone(), 1.0),
            };
            let width = if width > 0.0 { width } else { 1.0 };
            let mut col = Vec::with_capacity(1 + a.equality.len());
            col.push((a.objective - b.objective) * f_scale / width);
            col.extend(a.equality.iter().zip(&b.equality).map(|(x, y)| (x - y) / width));
            let ineq: Vec<f64> = a
                .inequality
                .iter()
                .zip(&b.inequality)
                .zip(g_scale)
                .map(|((x, y), s)| (x - y) * s / width)
                .collect();
            (col, ineq, width)
        })
        .collect();
    let me = base.equality.len();
    let mi = base.inequality.len();
    let mut grad = DVector::zeros(n);
    let mut a = DMatrix::zeros(me, n);
    let mut c = DMatrix::zeros(mi, n);
    for (j, (col, ineq, _)) in columns.into_iter().enumerate() {
        grad[j] = col[0];
        for r in 0..me {
            a[(r, j)] = col[1 + r];
        }
        for (r, v) in ineq.into_iter().enumerate() {
            c[(r, j)] = v;
        }
    }
    Derivatives { grad, a, c }
}

/// Objective gradient as the solver computes it (central differences clipped
/// to the variable box).
pub fn fd_gradient<N: Nlp + ?Sized>(nlp: &N, z: &[f64], step: f64) -> Vec<f64> {
    let base = nlp.evaluate(z);
    let ones = vec![1.0; base.inequality.len()];
    fd_derivatives(nlp, z, &base, step, 1.0, &ones)
        .grad
        .iter()
        .copied()
        .collect()
}

struct QpSolution {
    d: DVector<f64>,
    lambda_eq: DVector<f64>,
    /// Multipliers for every inequality row (zero for rows left out).
    lambda_in: DVector<f64>,
    /// `‖A d + h‖₁ + ‖(C d + g)⁺‖₁` at the solution.
    linear_violation: f64,
}

/// Inequality rows that the step box cannot activate are left out of the QP.
fn active_rows(c: &DMatrix<f64>, g: &[f64], radius: f64) -> Vec<usize> {
    (0..g.len())
        .filter(|&r| g[r] + c.row(r).iter().map(|v| v.abs()).sum::<f64>() * radius >= -1e-12)
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn solve_qp(
    b: &DMatrix<f64>,
    der: &Derivatives,
    cur: &Scaled,
    z: &[f64],
    lo: &[f64],
    hi: &[f64],
    mu: f64,
    radius: f64,
) -> std::result::Result<QpSolution, String> {
    let n = z.len();
    let me = cur.h.len();
    let rows = active_rows(&der.c, &cur.g, radius);
    let mi = rows.len();
    let nx = n + 2 * me + mi;

    // objective
    let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
    for j in 0..n {
        for i in 0..=j {
            let v = 0.5 * (b[(i, j)] + b[(j, i)]);
            if v != 0.0 {
                pi.push(i);
                pj.push(j);
                pv.push(v);
            }
        }
    }
    let p = CscMatrix::new_from_triplets(nx, nx, pi, pj, pv);
    let mut q = vec![mu; nx];
    q[..n].copy_from_slice(der.grad.as_slice());

    // constraints
    let (mut ai, mut aj, mut av) = (Vec::new(), Vec::new(), Vec::new());
    let mut rhs = Vec::new();
    let mut row = 0;
    for r in 0..me {
        for j in 0..n {
            let v = der.a[(r, j)];
            if v != 0.0 {
                ai.push(row);
                aj.push(j);
                av.push(v);
            }
        }
        ai.extend([row, row]);
        aj.extend([n + r, n + me + r]);
        av.extend([-1.0, 1.0]);
        rhs.push(-cur.h[r]);
        row += 1;
    }
    let n_zero = row;
    for (k, &r) in rows.iter().enumerate() {
        for j in 0..n {
            let v = der.c[(r, j)];
            if v != 0.0 {
                ai.push(row);
                aj.push(j);
                av.push(v);
            }
        }
        ai.push(row);
        aj.push(n + 2 * me + k);
        av.push(-1.0);
        rhs.push(-cur.g[r]);
        row += 1;
    }
    for s in n..nx {
        ai.push(row);
        aj.push(s);
        av.push(-1.0);
        rhs.push(0.0);
        row += 1;
    }
    for j in 0..n {
        let upper = (hi[j] - z[j]).min(radius);
        let lower = (lo[j] - z[j]).max(-radius);
        ai.push(row);
        aj.push(j);
        av.push(1.0);
        rhs.push(upper.max(0.0));
        row += 1;
        ai.push(row);
        aj.push(j);
        av.push(-1.0);
        rhs.push((-lower).max(0.0));
        row += 1;
    }
    let a = CscMatrix::new_from_triplets(row, nx, ai, aj, av);
    let mut cones = Vec::new();
    if n_zero > 0 {
        cones.push(ZeroConeT(n_zero));
    }
    cones.push(NonnegativeConeT(row - n_zero));

    let settings = DefaultSettings {
        verbose: false,
        max_iter: 500,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p, &q, &a, &rhs, &cones, settings).map_err(|e| format!("{e:?}"))?;
    solver.solve();
    match solver.solution.status {
        QpStatus::Solved | QpStatus::AlmostSolved => {}
        other => return Err(format!("QP subproblem status {other:?}")),
    }
    let x = &solver.solution.x;
    let zd = &solver.solution.z;
    let d = DVector::from_column_slice(&x[..n]);
    let lambda_eq = DVector::from_column_slice(&zd[..me]);
    let mut lambda_in = DVector::zeros(cur.g.len());
    for (k, &r) in rows.iter().enumerate() {
        lambda_in[r] = zd[me + k].max(0.0);
    }
    let lin_eq = (&der.a * &d)
        .iter()
        .zip(&cur.h)
        .map(|(ad, h)| (ad + h).abs())
        .sum::<f64>();
    let lin_in = (&der.c * &d)
        .iter()
        .zip(&cur.g)
        .map(|(cd, g)| (cd + g).max(0.0))
        .sum::<f64>();
    if !d.iter().all(|v| v.is_finite()) {
        return Err("QP step is not finite".into());
    }
    Ok(QpSolution {
        d,
        lambda_eq,
        lambda_in,
        linear_violation: lin_eq + lin_in,
    })
}

fn lagrangian_gradient(der: &Derivatives, qp: &QpSolution) -> DVector<f64> {
    &der.grad + der.a.transpose() * &qp.lambda_eq + der.c.transpose() * &qp.lambda_in
}

fn damped_bfgs(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if !(sbs > 1e-16) {
        return;
    }
    let sy = s.dot(y);
    let r = if sy >= 0.2 * sbs {
        y.clone()
    } else {
        let theta = 0.8 * sbs / (sbs - sy);
        y * theta + &bs * (1.0 - theta)
    };
    let sr = s.dot(&r);
    if !(sr > 1e-16) {
        return;
    }
    *b -= &bs * bs.transpose() / sbs;
    *b += &r * r.transpose() / sr;
}

fn clip(z: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    z.iter()
        .zip(lo.iter().zip(hi))
        .map(|(v, (l, h))| v.max(*l).min(*h))
        .collect()
}

/// Runs the SQP from `z0`.
pub fn solve<N: Nlp + ?Sized>(nlp: &N, z0: &[f64], config: &SolverConfig) -> Result<SolverOutcome> {
    config.validate()?;
    let n = nlp.n_vars();
    if z0.len() != n {
        return Err(Error::Configuration(format!(
            "initial point has {} entries, expected {n}",
            z0.len()
        )));
    }
    let (lo, hi) = nlp.bounds();
    let mut z = clip(z0, &lo, &hi);
    let mut point = nlp.evaluate(&z);
    let mut evaluations = 1;
    if !point.objective.is_finite() {
        return Err(Error::SolverBreakdown {
            reason: "objective is not finite at the initial point".into(),
            iterations: 0,
            last_iterate: z,
        });
    }
    let f_scale = 1.0 / point.objective.abs().max(1e-12);
    let g_scale = nlp.inequality_scale();
    let mut cur = scale_point(&point, f_scale, &g_scale);
    let mut mu = config.initial_penalty;
    let mut b = DMatrix::identity(n, n);
    let mut fresh_hessian = true;

    let mut out = SolverOutcome {
        z: z.clone(),
        status: SolverStatus::MaxIterations,
        iterations: 0,
        accepted_steps: 0,
        evaluations: 0,
        objective_trace: vec![point.objective],
        merit_trace: vec![merit(&cur, mu)],
        best_merit_trace: vec![merit(&cur, mu)],
        violation_trace: vec![cur.raw_violation],
        log: Vec::new(),
    };
    let mut best = merit(&cur, mu);
    let mut pending: Option<(DVector<f64>, DVector<f64>, QpSolution)> = None;

    for iter in 0..config.max_iterations {
        out.iterations = iter + 1;
        let der = fd_derivatives(nlp, &z, &point, config.fd_step, f_scale, &g_scale);
        evaluations += 2 * n;

        if let Some((s, grad_l_old, qp_old)) = pending.take() {
            let grad_l_new = lagrangian_gradient(&der, &qp_old);
            damped_bfgs(&mut b, &s, &(grad_l_new - grad_l_old));
        }

        let mut qp = match solve_qp(&b, &der, &cur, &z, &lo, &hi, mu, config.max_step) {
            Ok(qp) => qp,
            Err(first) => {
                b = DMatrix::identity(n, n);
                fresh_hessian = true;
                solve_qp(&b, &der, &cur, &z, &lo, &hi, mu, config.max_step).map_err(|reason| {
                    Error::SolverBreakdown {
                        reason: format!("{first}; after Hessian reset: {reason}"),
                        iterations: iter,
                        last_iterate: z.clone(),
                    }
                })?
            }
        };

        // raise the penalty while the linearized violation barely improves
        let viol = l1_violation(&cur);
        let mut raises = 0;
        while viol > 0.0 && qp.linear_violation > 0.9 * viol && mu < config.max_penalty && raises < 3 {
            mu = (mu * config.penalty_growth).min(config.max_penalty);
            raises += 1;
            match solve_qp(&b, &der, &cur, &z, &lo, &hi, mu, config.max_step) {
                Ok(next) => qp = next,
                Err(_) => break,
            }
        }
        let lam = qp.lambda_eq.amax().max(qp.lambda_in.amax());
        if 1.5 * lam > mu {
            mu = (1.5 * lam).min(config.max_penalty);
        }

        let d = qp.d.clone();
        let pred = -der.grad.dot(&d) - 0.5 * d.dot(&(&b * &d)) + mu * (viol - qp.linear_violation);
        let phi = merit(&cur, mu);
        let d_norm = d.amax();
        let z_norm = z.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let small_step = d_norm <= config.optimality_tolerance * (1.0 + z_norm);
        let small_pred = pred <= config.optimality_tolerance * phi.abs().max(1.0);
        if cur.raw_violation <= config.feasibility_tolerance && (small_step || small_pred) {
            out.status = SolverStatus::Converged;
            out.iterations = iter;
            break;
        }

        // backtracking on the merit function
        let grad_l_old = lagrangian_gradient(&der, &qp);
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= config.min_step_fraction {
            let trial: Vec<f64> = clip(
                &z.iter().zip(d.iter()).map(|(v, dv)| v + alpha * dv).collect::<Vec<_>>(),
                &lo,
                &hi,
            );
            let tp = nlp.evaluate(&trial);
            evaluations += 1;
            let ts = scale_point(&tp, f_scale, &g_scale);
            let phi_t = merit(&ts, mu);
            if !ts.penalized && phi_t.is_finite() && phi_t <= phi - config.armijo * alpha * pred.max(0.0) {
                accepted = Some((trial, tp, ts, phi_t));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, tp, ts, phi_t)) => {
                let s = DVector::from_iterator(n, trial.iter().zip(&z).map(|(a, b)| a - b));
                pending = Some((s, grad_l_old, qp));
                z = trial;
                point = tp;
                cur = ts;
                fresh_hessian = false;
                out.accepted_steps += 1;
                best = best.min(phi_t);
                out.objective_trace.push(cur.raw_objective);
                out.merit_trace.push(phi_t);
                out.best_merit_trace.push(best);
                out.violation_trace.push(cur.raw_violation);
                out.log.push(IterationRecord {
                    iteration: iter + 1,
                    objective: cur.raw_objective,
                    merit: phi_t,
                    violation: cur.raw_violation,
                    penalty: mu,
                    step_length: alpha,
                    step_norm: d_norm * alpha,
                    predicted_reduction: pred,
                });
            }
            None if !fresh_hessian => {
                b = DMatrix::identity(n, n);
                fresh_hessian = true;
            }
            None => {
                out.status = SolverStatus::Stalled;
                break;
            }
        }
    }
    out.z = z;
    out.evaluations = evaluations;
    Ok(out)
}
