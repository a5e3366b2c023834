//! Clamped uniform B-splines for joint trajectories: `θ(t) = B(t) c`,
//! `θ̇(t) = Ḃ(t) c`, `θ̈(t) = B̈(t) c`, with `B(t)` block-diagonal per joint and
//! `c` stacked joint-major.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Uniform collocation times `t_k = t0 + k Δt`, `k = 0..=M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollocationGrid<T> {
    pub t0: T,
    pub dt: T,
    /// Number of partitions; the grid has `M + 1` points.
    #[serde(rename = "M")]
    pub m: usize,
}

impl<T: Real> CollocationGrid<T> {
    pub fn new(t0: T, dt: T, m: usize) -> Result<Self> {
        let g = Self { t0, dt, m };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Configuration("collocation grid needs M >= 2".into()));
        }
        if !(self.dt > T::zero()) || !self.dt.is_finite_val() || !self.t0.is_finite_val() {
            return Err(Error::Configuration("collocation step must be finite and > 0".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.m + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, k: usize) -> T {
        self.t0 + self.dt * T::from_usize(k).unwrap_or_else(T::zero)
    }

    pub fn end(&self) -> T {
        self.time(self.m)
    }

    pub fn times(&self) -> Vec<T> {
        (0..=self.m).map(|k| self.time(k)).collect()
    }
}

/// Basis values and first two time derivatives at one instant; only the
/// `degree + 1` functions starting at `first` are nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisRow<T> {
    pub first: usize,
    pub value: Vec<T>,
    pub d1: Vec<T>,
    pub d2: Vec<T>,
}

impl<T: Real> BasisRow<T> {
    /// `Σ b_i c_i` written as `c_0 Σ b_i + Σ b_i (c_i - c_0)` with the exact
    /// basis sums (1, 0, 0), so constant controls give exactly flat output.
    fn dot(&self, coeffs: &[T], which: &[T], order: usize) -> T {
        let anchor = coeffs[self.first];
        let rest = which
            .iter()
            .enumerate()
            .skip(1)
            .fold(T::zero(), |acc, (i, &b)| acc + b * (coeffs[self.first + i] - anchor));
        if order == 0 {
            anchor + rest
        } else {
            rest
        }
    }

    /// Dense row of length `n_ctrl` for derivative order 0, 1 or 2.
    pub fn dense(&self, n_ctrl: usize, order: usize) -> Vec<T> {
        let src = match order {
            0 => &self.value,
            1 => &self.d1,
            _ => &self.d2,
        };
        let mut row = vec![T::zero(); n_ctrl];
        for (i, &b) in src.iter().enumerate() {
            row[self.first + i] = b;
        }
        row
    }
}

/// Spline basis on a clamped uniform knot vector, pre-evaluated on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis<T> {
    pub degree: usize,
    /// Control points per joint (`N`).
    pub n_ctrl: usize,
    pub knots: Vec<T>,
    pub grid: CollocationGrid<T>,
    pub rows: Vec<BasisRow<T>>,
}

/// Joint position, velocity and acceleration vectors at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample<T: Real> {
    pub theta: DVector<T>,
    pub theta_dot: DVector<T>,
    pub theta_ddot: DVector<T>,
}

/// Clamped uniform knots over `[t0, t1]`.
pub fn clamped_uniform_knots<T: Real>(degree: usize, n_ctrl: usize, t0: T, t1: T) -> Vec<T> {
    let segments = n_ctrl - degree;
    let mut knots = Vec::with_capacity(n_ctrl + degree + 1);
    knots.extend(std::iter::repeat_n(t0, degree + 1));
    for i in 1..segments {
        let frac = T::from_usize(i).unwrap_or_else(T::zero) / T::from_usize(segments).unwrap_or_else(T::one);
        knots.push(t0 + (t1 - t0) * frac);
    }
    knots.extend(std::iter::repeat_n(t1, degree + 1));
    knots
}

fn find_span<T: Real>(knots: &[T], degree: usize, n_ctrl: usize, t: T) -> usize {
    if t >= knots[n_ctrl] {
        return n_ctrl - 1;
    }
    // largest i in [degree, n_ctrl - 1] with knots[i] <= t
    let mut lo = degree;
    let mut hi = n_ctrl;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if knots[mid] <= t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Nonzero basis functions and their derivatives up to `n_der` at `t`
/// (Piegl & Tiller style triangular recurrence).
fn basis_derivatives<T: Real>(knots: &[T], degree: usize, span: usize, t: T, n_der: usize) -> Vec<Vec<T>> {
    let p = degree;
    let zero = T::zero();
    let mut ndu = vec![vec![zero; p + 1]; p + 1];
    let mut left = vec![zero; p + 1];
    let mut right = vec![zero; p + 1];
    ndu[0][0] = T::one();
    for j in 1..=p {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = zero;
        for r in 0..j {
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }

    let mut ders = vec![vec![zero; p + 1]; n_der + 1];
    for j in 0..=p {
        ders[0][j] = ndu[j][p];
    }
    let mut a = vec![vec![zero; p + 1]; 2];
    for r in 0..=p {
        let (mut s1, mut s2) = (0usize, 1usize);
        a[0][0] = T::one();
        for k in 1..=n_der {
            let mut d = zero;
            let rk = r as isize - k as isize;
            let pk = p - k.min(p);
            if k > p {
                ders[k][r] = zero;
                continue;
            }
            if rk >= 0 {
                a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                d = a[s2][0] * ndu[rk as usize][pk];
            }
            let j1: usize = if rk >= -1 { 1 } else { (-rk) as usize };
            let j2: usize = if (r as isize - 1) <= pk as isize { k - 1 } else { p - r };
            for j in j1..=j2 {
                let idx = (rk + j as isize) as usize;
                a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                d += a[s2][j] * ndu[idx][pk];
            }
            if r <= pk {
                a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                d += a[s2][k] * ndu[r][pk];
            }
            ders[k][r] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    let mut factor = T::from_usize(p).unwrap_or_else(T::one);
    for (k, row) in ders.iter_mut().enumerate().skip(1) {
        for v in row.iter_mut() {
            *v *= factor;
        }
        factor *= T::from_usize(p.saturating_sub(k)).unwrap_or_else(T::zero);
    }
    ders
}

impl<T: Real> SplineBasis<T> {
    pub fn t_start(&self) -> T {
        self.knots[0]
    }

    pub fn t_end(&self) -> T {
        self.knots[self.knots.len() - 1]
    }

    /// Basis row at an arbitrary time inside the knot span.
    pub fn row_at(&self, t: T) -> Result<BasisRow<T>> {
        if !t.is_finite_val() || t < self.t_start() || t > self.t_end() {
            return Err(Error::Range(format!(
                "time {} outside spline span [{}, {}]",
                t.as_f64(),
                self.t_start().as_f64(),
                self.t_end().as_f64()
            )));
        }
        let span = find_span(&self.knots, self.degree, self.n_ctrl, t);
        let mut ders = basis_derivatives(&self.knots, self.degree, span, t, 2);
        let d2 = ders.pop().unwrap_or_default();
        let d1 = ders.pop().unwrap_or_default();
        let value = ders.pop().unwrap_or_default();
        Ok(BasisRow {
            first: span - self.degree,
            value,
            d1,
            d2,
        })
    }

    /// Number of stacked control points for `n_joints` joints.
    pub fn n_coeffs(&self, n_joints: usize) -> usize {
        self.n_ctrl * n_joints
    }

    fn evaluate_row(&self, row: &BasisRow<T>, c: &[T], n_joints: usize) -> Result<JointSample<T>> {
        if c.len() != self.n_coeffs(n_joints) {
            return Err(Error::Configuration(format!(
                "control vector has {} entries, expected {}",
                c.len(),
                self.n_coeffs(n_joints)
            )));
        }
        let mut out = JointSample {
            theta: DVector::zeros(n_joints),
            theta_dot: DVector::zeros(n_joints),
            theta_ddot: DVector::zeros(n_joints),
        };
        for j in 0..n_joints {
            let cj = &c[j * self.n_ctrl..(j + 1) * self.n_ctrl];
            out.theta[j] = row.dot(cj, &row.value, 0);
            out.theta_dot[j] = row.dot(cj, &row.d1, 1);
            out.theta_ddot[j] = row.dot(cj, &row.d2, 2);
        }
        Ok(out)
    }

    /// `(θ, θ̇, θ̈)` at time `t`.
    pub fn evaluate(&self, c: &[T], n_joints: usize, t: T) -> Result<JointSample<T>> {
        let row = self.row_at(t)?;
        self.evaluate_row(&row, c, n_joints)
    }

    /// `(θ, θ̇, θ̈)` at collocation index `k`.
    pub fn evaluate_at(&self, k: usize, c: &[T], n_joints: usize) -> Result<JointSample<T>> {
        let row = self
            .rows
            .get(k)
            .ok_or_else(|| Error::Range(format!("collocation index {k} out of range")))?;
        self.evaluate_row(row, c, n_joints)
    }

    /// Dense `n × nN` block-diagonal `B`, `Ḃ`, `B̈` at collocation index `k`.
    pub fn matrices_at(&self, k: usize, n_joints: usize) -> (DMatrix<T>, DMatrix<T>, DMatrix<T>) {
        let row = &self.rows[k];
        let cols = self.n_coeffs(n_joints);
        let mut mats = [
            DMatrix::zeros(n_joints, cols),
            DMatrix::zeros(n_joints, cols),
            DMatrix::zeros(n_joints, cols),
        ];
        for (order, m) in mats.iter_mut().enumerate() {
            let dense = row.dense(self.n_ctrl, order);
            for j in 0..n_joints {
                for (i, &v) in dense.iter().enumerate() {
                    m[(j, j * self.n_ctrl + i)] = v;
                }
            }
        }
        let [b, bd, bdd] = mats;
        (b, bd, bdd)
    }
}

/// Builds the basis over the grid's time span and evaluates it at every grid point.
pub fn build_basis<T: Real>(degree: usize, n_ctrl: usize, grid: &CollocationGrid<T>) -> Result<SplineBasis<T>> {
    grid.validate()?;
    if degree < 1 {
        return Err(Error::Configuration("spline degree must be >= 1".into()));
    }
    if n_ctrl <= degree {
        return Err(Error::Configuration(format!(
            "need more control points ({n_ctrl}) than the spline degree ({degree})"
        )));
    }
    let knots = clamped_uniform_knots(degree, n_ctrl, grid.t0, grid.end());
    let mut basis = SplineBasis {
        degree,
        n_ctrl,
        knots,
        grid: *grid,
        rows: Vec::new(),
    };
    let mut rows = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        // the last grid time can drift past the knot end by rounding
        let t = grid.time(k).min(basis.t_end());
        rows.push(basis.row_at(t)?);
    }
    basis.rows = rows;
    Ok(basis)
}

/// Least-squares control points and the fit quality.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineFit<T> {
    pub controls: Vec<T>,
    /// Root-mean-square residual over all samples and joints.
    pub rms_residual: T,
    /// Residual sum of squares per joint.
    pub residual_ss: Vec<T>,
}

/// Fits control points to joint samples (`samples[i]` taken at `times[i]`).
pub fn fit_initial_controls<T: Real>(
    basis: &SplineBasis<T>,
    times: &[T],
    samples: &[DVector<T>],
) -> Result<SplineFit<T>> {
    if times.len() != samples.len() || samples.is_empty() {
        return Err(Error::Fitting(
            "times and samples must have equal, nonzero length".into(),
        ));
    }
    if samples.len() < basis.n_ctrl {
        return Err(Error::Fitting(format!(
            "{} samples cannot determine {} control points",
            samples.len(),
            basis.n_ctrl
        )));
    }
    let n_joints = samples[0].len();
    if samples.iter().any(|s| s.len() != n_joints) {
        return Err(Error::Fitting("samples have inconsistent joint counts".into()));
    }
    let mut a = DMatrix::zeros(samples.len(), basis.n_ctrl);
    for (i, &t) in times.iter().enumerate() {
        let row = basis.row_at(t)?;
        for (j, v) in row.dense(basis.n_ctrl, 0).into_iter().enumerate() {
            a[(i, j)] = v;
        }
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * T::lit(1e-10);
    if svd.singular_values.iter().any(|&s| s <= tol) {
        return Err(Error::Fitting(
            "basis matrix is rank deficient at the sample times".into(),
        ));
    }
    let mut controls = Vec::with_capacity(basis.n_coeffs(n_joints));
    let mut residual_ss = Vec::with_capacity(n_joints);
    for j in 0..n_joints {
        let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s[j]));
        let cj = svd.solve(&y, tol).map_err(|e| Error::Fitting(e.to_string()))?;
        let r = &a * &cj - &y;
        residual_ss.push(r.norm_squared());
        controls.extend(cj.iter().copied());
    }
    let total: T = residual_ss.iter().fold(T::zero(), |acc, &v| acc + v);
    let count = T::from_usize(samples.len() * n_joints).unwrap_or_else(T::one);
    Ok(SplineFit {
        controls,
        rms_residual: (total / count).sqrt(),
        residual_ss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn basis() -> SplineBasis<f64> {
        let grid = CollocationGrid::new(0.0, 0.25, 25).unwrap();
        build_basis(3, 22, &grid).unwrap()
    }

    #[test]
    fn partition_of_unity_on_grid() {
        let b = basis();
        for row in &b.rows {
            let s: f64 = row.value.iter().sum();
            let s1: f64 = row.d1.iter().sum();
            let s2: f64 = row.d2.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(s1.abs() < 1e-12);
            assert!(s2.abs() < 1e-9);
        }
    }

    #[test]
    fn clamped_endpoints() {
        let b = basis();
        let c: Vec<f64> = (0..66).map(|i| (i as f64 * 0.37).sin()).collect();
        let s0 = b.evaluate_at(0, &c, 3).unwrap();
        let s_end = b.evaluate_at(25, &c, 3).unwrap();
        for j in 0..3 {
            assert_relative_eq!(s0.theta[j], c[j * 22], epsilon = 1e-14);
            assert_relative_eq!(s_end.theta[j], c[j * 22 + 21], epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_controls_are_flat() {
        let b = basis();
        let c = vec![0.75; 22];
        for t in [0.0, 0.1, 3.3, 6.25] {
            let s = b.evaluate(&c, 1, t).unwrap();
            assert_eq!(s.theta[0], 0.75);
            assert_eq!(s.theta_dot[0], 0.0);
            assert_eq!(s.theta_ddot[0], 0.0);
        }
    }

    #[test]
    fn linear_controls_give_zero_interior_acceleration() {
        // uniform clamped cubics reproduce a straight line from Greville-placed controls
        let b = basis();
        let greville: Vec<f64> = (0..22)
            .map(|i| (b.knots[i + 1] + b.knots[i + 2] + b.knots[i + 3]) / 3.0)
            .collect();
        let c: Vec<f64> = greville.iter().map(|g| 0.2 + 0.5 * g).collect();
        for t in [0.7, 2.0, 4.4, 6.0] {
            let s = b.evaluate(&c, 1, t).unwrap();
            assert_relative_eq!(s.theta[0], 0.2 + 0.5 * t, epsilon = 1e-12);
            assert_relative_eq!(s.theta_dot[0], 0.5, epsilon = 1e-12);
            assert!(s.theta_ddot[0].abs() < 1e-10);
        }
    }

    #[test]
    fn evaluation_is_linear_in_controls() {
        let b = basis();
        let c1: Vec<f64> = (0..22).map(|i| (i as f64).cos()).collect();
        let c2: Vec<f64> = (0..22).map(|i| (i as f64 * 0.3).sin()).collect();
        let sum: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a + b).collect();
        let t = 2.71;
        let (a, bb, s) = (
            b.evaluate(&c1, 1, t).unwrap(),
            b.evaluate(&c2, 1, t).unwrap(),
            b.evaluate(&sum, 1, t).unwrap(),
        );
        assert_relative_eq!(s.theta[0], a.theta[0] + bb.theta[0], epsilon = 1e-13);
        assert_relative_eq!(s.theta_ddot[0], a.theta_ddot[0] + bb.theta_ddot[0], epsilon = 1e-11);
    }

    #[test]
    fn out_of_span_is_range_error() {
        let b = basis();
        assert!(matches!(b.evaluate(&[0.0; 22], 1, 6.3), Err(Error::Range(_))));
        assert!(matches!(b.evaluate(&[0.0; 22], 1, -0.01), Err(Error::Range(_))));
    }

    #[test]
    fn too_few_controls_is_configuration_error() {
        let grid = CollocationGrid::new(0.0, 0.5, 12).unwrap();
        assert!(matches!(build_basis::<f64>(3, 3, &grid), Err(Error::Configuration(_))));
        assert!(CollocationGrid::new(0.0, 0.5, 1).is_err());
    }

    #[test]
    fn block_diagonal_matrices() {
        let b = basis();
        let (bm, bd, _) = b.matrices_at(7, 3);
        assert_eq!(bm.shape(), (3, 66));
        for j in 0..3 {
            let row_sum: f64 = bm.row(j).iter().sum();
            assert_relative_eq!(row_sum, 1.0, epsilon = 1e-12);
            let own: f64 = bm.row(j).columns(j * 22, 22).iter().sum();
            assert_relative_eq!(own, 1.0, epsilon = 1e-12);
            assert!(bd.row(j).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn fit_recovers_known_controls() {
        let b = basis();
        let c: Vec<f64> = (0..44).map(|i| 0.1 * (i as f64 * 0.77).sin()).collect();
        let times: Vec<f64> = (0..120).map(|i| 6.25 * i as f64 / 119.0).collect();
        let samples: Vec<DVector<f64>> = times.iter().map(|&t| b.evaluate(&c, 2, t).unwrap().theta).collect();
        let fit = fit_initial_controls(&b, &times, &samples).unwrap();
        for (a, e) in fit.controls.iter().zip(&c) {
            assert!((a - e).abs() < 1e-8);
        }
        assert!(fit.rms_residual < 1e-10);
    }

    #[test]
    fn fit_of_constant_is_constant() {
        let b = basis();
        let times: Vec<f64> = (0..60).map(|i| 6.25 * i as f64 / 59.0).collect();
        let samples = vec![DVector::from_element(1, -0.4); 60];
        let fit = fit_initial_controls(&b, &times, &samples).unwrap();
        assert!(fit.controls.iter().all(|v| (v + 0.4).abs() < 1e-10));
    }

    #[test]
    fn fit_rejects_rank_deficiency() {
        let b = basis();
        // many samples, all in the first knot span
        let times: Vec<f64> = (0..40).map(|i| 0.01 * i as f64).collect();
        let samples = vec![DVector::from_element(1, 1.0); 40];
        assert!(matches!(
            fit_initial_controls(&b, &times, &samples),
            Err(Error::Fitting(_))
        ));
        assert!(matches!(
            fit_initial_controls(&b, &times[..5], &samples[..5]),
            Err(Error::Fitting(_))
        ));
    }
}
