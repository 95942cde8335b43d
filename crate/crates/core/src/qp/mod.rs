//! Small dense convex QP solver and the LP routines behind it.
//!
//! `solve_qp` is a primal active-set method: it starts from a strictly
//! feasible point (a Chebyshev center found by LP) and walks the working
//! set until the multipliers are nonnegative. Ties are broken by lowest
//! constraint index, so results are reproducible bit for bit.

mod polyhedron;
mod simplex;

pub use polyhedron::{
    chebyshev_ball, contains, lp_feasible, normalize_rows, remove_redundant, Feasibility,
};
pub use simplex::{minimize as lp_minimize, LpOutcome};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("no point satisfies the constraints")]
    Infeasible,
    #[error("cost matrix is not positive definite or the KKT system is singular")]
    IllConditioned,
    #[error("active-set iteration limit reached")]
    IterationLimit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// Constraint satisfaction tolerance.
    pub feas_tol: f64,
    /// Multiplier nonnegativity tolerance.
    pub mult_tol: f64,
    /// Pivot threshold for factorizations and dependence tests.
    pub pivot_tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            feas_tol: 1e-8,
            mult_tol: 1e-9,
            pivot_tol: 1e-12,
            max_iter: 500,
        }
    }
}

/// `min 1/2 z'Hz + f'z  s.t.  G z <= w`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g: DMatrix<f64>,
    pub w: DVector<f64>,
}

impl DenseQp {
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.f.dot(z)
    }

    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        (&self.g * z - &self.w).iter().fold(0.0f64, |a, v| a.max(*v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Working-set constraint indices, ascending.
    pub active_set: Vec<usize>,
    /// Multipliers aligned with `active_set`.
    pub multipliers: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

impl QpSolution {
    /// Largest KKT residual: stationarity, primal feasibility, dual
    /// feasibility and complementarity.
    pub fn kkt_residual(&self, qp: &DenseQp) -> f64 {
        let mut grad = &qp.h * &self.z + &qp.f;
        for (&i, &lam) in self.active_set.iter().zip(&self.multipliers) {
            grad += qp.g.row(i).transpose() * lam;
        }
        let stationarity = grad.amax();
        let primal = qp.max_violation(&self.z).max(0.0);
        let dual = self.multipliers.iter().fold(0.0f64, |a, l| a.max(-l));
        let comp = self
            .active_set
            .iter()
            .zip(&self.multipliers)
            .map(|(&i, &lam)| (lam * (qp.g.row(i).dot(&self.z.transpose()) - qp.w[i])).abs())
            .fold(0.0, f64::max);
        stationarity.max(primal).max(dual).max(comp)
    }
}

/// Per-call solver state; nothing is shared between calls.
struct ActiveSetRun<'a> {
    qp: &'a DenseQp,
    chol: Cholesky<f64, Dyn>,
    settings: QpSettings,
}

impl<'a> ActiveSetRun<'a> {
    /// Solves the equality-constrained step from `z` on `working`.
    /// Returns `(step, multipliers)`.
    fn equality_step(
        &self,
        z: &DVector<f64>,
        working: &[usize],
    ) -> Result<(DVector<f64>, DVector<f64>), QpError> {
        let grad = &self.qp.h * z + &self.qp.f;
        if working.is_empty() {
            return Ok((-self.chol.solve(&grad), DVector::zeros(0)));
        }
        let n = z.len();
        let gw = DMatrix::from_fn(working.len(), n, |r, c| self.qp.g[(working[r], c)]);
        let hinv_gt = self.chol.solve(&gw.transpose());
        let hinv_grad = self.chol.solve(&grad);
        let schur = &gw * &hinv_gt;
        let rhs = -(&gw * &hinv_grad);
        let lambda = schur
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| schur.lu().solve(&rhs))
            .ok_or(QpError::IllConditioned)?;
        let step = -(hinv_grad + hinv_gt * &lambda);
        Ok((step, lambda))
    }

    /// True when row `i` is linearly independent of the working rows.
    fn independent(&self, working: &[usize], i: usize) -> bool {
        let n = self.qp.g.ncols();
        if working.len() >= n {
            return false;
        }
        let mut rows: Vec<usize> = working.to_vec();
        rows.push(i);
        let m = DMatrix::from_fn(rows.len(), n, |r, c| self.qp.g[(rows[r], c)]);
        let gram = &m * m.transpose();
        let scale = gram.diagonal().amax().max(1.0);
        gram.cholesky()
            .map(|c| {
                let l = c.l();
                (0..rows.len()).all(|k| l[(k, k)] * l[(k, k)] > self.settings.pivot_tol * scale)
            })
            .unwrap_or(false)
    }

    fn solve(&self, start: DVector<f64>) -> Result<QpSolution, QpError> {
        let s = self.settings;
        let mut z = start;
        let mut working: Vec<usize> = Vec::new();
        for iter in 0..s.max_iter {
            let (step, lambda) = self.equality_step(&z, &working)?;
            let step_norm = step.amax();
            if step_norm <= 1e-12 * z.amax().max(1.0) {
                // Stationary on the working set: check multipliers.
                let worst = lambda
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l < -s.mult_tol)
                    .min_by(|a, b| a.1.total_cmp(b.1).then(working[a.0].cmp(&working[b.0])));
                match worst {
                    None => {
                        let mut pairs: Vec<(usize, f64)> =
                            working.iter().copied().zip(lambda.iter().copied()).collect();
                        pairs.sort_by_key(|p| p.0);
                        let objective = self.qp.objective(&z);
                        return Ok(QpSolution {
                            z,
                            active_set: pairs.iter().map(|p| p.0).collect(),
                            multipliers: pairs.iter().map(|p| p.1.max(0.0)).collect(),
                            objective,
                            iterations: iter + 1,
                        });
                    }
                    Some((k, _)) => {
                        working.remove(k);
                        continue;
                    }
                }
            }

            // Ratio test over constraints outside the working set.
            let mut alpha = 1.0;
            let mut blocking: Option<usize> = None;
            for i in 0..self.qp.g.nrows() {
                if working.contains(&i) {
                    continue;
                }
                let gi = self.qp.g.row(i);
                let rate = gi.dot(&step.transpose());
                if rate <= 1e-14 * gi.amax().max(1.0) * step_norm {
                    continue;
                }
                let slack = (self.qp.w[i] - gi.dot(&z.transpose())).max(0.0);
                let t = slack / rate;
                if t < alpha || (t == alpha && blocking.is_some_and(|b| i < b)) {
                    alpha = t;
                    blocking = Some(i);
                }
            }
            z += &step * alpha;
            if let Some(b) = blocking {
                if self.independent(&working, b) {
                    working.push(b);
                } else {
                    // Dependent blocking row at a degenerate vertex: keep
                    // the lowest-index rows and move on.
                    log::trace!("qp: dependent blocking constraint {b} skipped");
                    if alpha == 0.0 {
                        return Err(QpError::IllConditioned);
                    }
                }
            }
        }
        Err(QpError::IterationLimit)
    }
}

/// Solves a dense strictly convex QP.
pub fn solve_qp(qp: &DenseQp, settings: &QpSettings) -> Result<QpSolution, QpError> {
    let n = qp.h.nrows();
    let sym = (&qp.h - qp.h.transpose()).amax();
    if sym > 1e-10 * qp.h.amax().max(1.0) {
        return Err(QpError::IllConditioned);
    }
    let chol = qp.h.clone().cholesky().ok_or(QpError::IllConditioned)?;
    let run = ActiveSetRun {
        qp,
        chol,
        settings: *settings,
    };

    let unconstrained = -run.chol.solve(&qp.f);
    if qp.g.nrows() == 0 || qp.max_violation(&unconstrained) <= settings.feas_tol {
        let objective = qp.objective(&unconstrained);
        return Ok(QpSolution {
            z: unconstrained,
            active_set: vec![],
            multipliers: vec![],
            objective,
            iterations: 0,
        });
    }

    let start = match lp_feasible(&qp.g, &qp.w, settings.feas_tol) {
        Feasibility::Feasible { witness, .. } => witness,
        Feasibility::Infeasible => return Err(QpError::Infeasible),
    };
    debug_assert_eq!(start.len(), n);
    let sol = run.solve(start)?;
    if qp.max_violation(&sol.z) > settings.feas_tol * 10.0 {
        return Err(QpError::Infeasible);
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qp(h: &[f64], f: &[f64], g: &[f64], w: &[f64]) -> DenseQp {
        let n = f.len();
        let m = w.len();
        DenseQp {
            h: DMatrix::from_row_slice(n, n, h),
            f: DVector::from_column_slice(f),
            g: DMatrix::from_row_slice(m, n, g),
            w: DVector::from_column_slice(w),
        }
    }

    #[test]
    fn unconstrained_minimum() {
        let p = qp(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], &[], &[]);
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(sol.z.amax(), 0.0);
        assert!(sol.active_set.is_empty());
    }

    #[test]
    fn clipped_minimum() {
        let p = qp(&[1.0], &[-2.0], &[1.0], &[1.0]);
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_abs_diff_eq!(sol.z[0], 1.0, epsilon = 1e-12);
        assert_eq!(sol.active_set, vec![0]);
        assert_abs_diff_eq!(sol.multipliers[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn infeasible_and_indefinite() {
        let p = qp(&[1.0], &[0.0], &[1.0, -1.0], &[0.0, -1.0]);
        assert_eq!(solve_qp(&p, &QpSettings::default()), Err(QpError::Infeasible));
        let p = qp(&[-1.0], &[0.0], &[], &[]);
        assert_eq!(solve_qp(&p, &QpSettings::default()), Err(QpError::IllConditioned));
        let p = qp(&[1.0, 0.5, 0.0, 1.0], &[0.0, 0.0], &[], &[]);
        assert_eq!(solve_qp(&p, &QpSettings::default()), Err(QpError::IllConditioned));
    }

    #[test]
    fn degenerate_vertex() {
        // Three constraints active at the optimum (1, 1) in two variables.
        let p = qp(
            &[1.0, 0.0, 0.0, 1.0],
            &[-3.0, -3.0],
            &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            &[1.0, 1.0, 2.0],
        );
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_abs_diff_eq!(sol.z[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.z[1], 1.0, epsilon = 1e-9);
        assert!(sol.active_set.len() <= 2);
        assert!(sol.kkt_residual(&p) < 1e-8);
    }

    fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DenseQp {
        let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
        let f = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let g = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_fn(m, |_, _| rng.random_range(-0.2..1.0));
        DenseQp { h, f, g, w }
    }

    #[test]
    fn kkt_and_determinism_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let settings = QpSettings::default();
        let mut solved = 0;
        for _ in 0..400 {
            let n = rng.random_range(1..7);
            let m = rng.random_range(0..15);
            let p = random_qp(&mut rng, n, m);
            match solve_qp(&p, &settings) {
                Ok(sol) => {
                    solved += 1;
                    assert!(sol.kkt_residual(&p) < 1e-8, "kkt {}", sol.kkt_residual(&p));
                    let again = solve_qp(&p, &settings).unwrap();
                    assert_eq!(again.active_set, sol.active_set);
                    assert_eq!(again.z, sol.z);
                    // No feasible random point beats the optimum.
                    for _ in 0..200 {
                        let z = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
                        if p.max_violation(&z) <= 0.0 {
                            assert!(p.objective(&z) >= sol.objective - 1e-9);
                        }
                    }
                }
                Err(QpError::Infeasible) => {
                    assert!(!lp_feasible(&p.g, &p.w, 1e-9).is_feasible());
                }
                Err(e) => panic!("{e}"),
            }
        }
        assert!(solved > 200);
    }

    /// Brute-force minimum over a grid of pitch `pitch` on [-1, 1]^2.
    fn grid_minimum(p: &DenseQp, pitch: f64) -> Option<(f64, [f64; 2])> {
        let steps = (2.0 / pitch).round() as i64;
        let (h, f, g, w) = (&p.h, &p.f, &p.g, &p.w);
        let mut best: Option<(f64, [f64; 2])> = None;
        for i in 0..=steps {
            let x = -1.0 + i as f64 * pitch;
            for j in 0..=steps {
                let y = -1.0 + j as f64 * pitch;
                if (0..g.nrows()).any(|r| g[(r, 0)] * x + g[(r, 1)] * y > w[r]) {
                    continue;
                }
                let v = 0.5 * (h[(0, 0)] * x * x + 2.0 * h[(0, 1)] * x * y + h[(1, 1)] * y * y)
                    + f[0] * x
                    + f[1] * y;
                if best.is_none_or(|b| v < b.0) {
                    best = Some((v, [x, y]));
                }
            }
        }
        best
    }

    #[test]
    fn agrees_with_grid_search_in_two_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let settings = QpSettings::default();
        let mut compared = 0;
        while compared < 20 {
            let mut p = random_qp(&mut rng, 2, 4);
            p.h += DMatrix::identity(2, 2);
            // The box [-1, 1]^2 keeps the grid finite.
            p.g = p.g.insert_rows(4, 4, 0.0);
            p.w = p.w.insert_rows(4, 4, 1.0);
            for (r, c, v) in [(4, 0, 1.0), (5, 0, -1.0), (6, 1, 1.0), (7, 1, -1.0)] {
                p.g[(r, c)] = v;
            }
            let Some((grid_best, _)) = grid_minimum(&p, 1e-3) else {
                assert!(solve_qp(&p, &settings).is_err());
                continue;
            };
            let sol = solve_qp(&p, &settings).unwrap();
            compared += 1;
            assert!(sol.objective <= grid_best + 1e-9);
            // Lipschitz constant of the objective on the box, with slack for
            // narrow feasible wedges where the nearest grid point is several
            // pitches away.
            let lipschitz = p.h.norm() * 2f64.sqrt() + p.f.norm();
            assert!(
                grid_best - sol.objective < 4.0 * lipschitz * 1e-3,
                "qp {} grid {grid_best}",
                sol.objective
            );
        }
    }
}
