//! Explicit solution of a segment mpQP: critical regions with affine laws,
//! found by stepping across region facets, and sequential point location.

mod table;

use std::collections::BTreeSet;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpqp::{MpqpProblem, Theta, THETA_DIM};
use crate::qp::{
    chebyshev_ball, lp_feasible, normalize_rows, remove_redundant, solve_qp, Feasibility,
    QpError, QpSettings,
};

pub use table::{export_table, import_table, TableFile, TableFormat, TABLE_VERSION};

/// Default point-location tolerance.
pub const LOCATE_TOL: f64 = 1e-9;
/// Smallest Chebyshev radius of a stored region.
pub const MIN_RADIUS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("QP infeasible at theta = {theta:?}")]
    InfeasibleAtTheta { theta: Vec<f64> },
    #[error("active set {active_set:?} at theta = {theta:?} gives no full-dimensional region")]
    DegenerateActiveSet {
        active_set: Vec<usize>,
        theta: Vec<f64>,
    },
    #[error("exploration stalled at theta = {theta:?} (coverage {coverage:.5})")]
    ExplorationStalled { theta: Vec<f64>, coverage: f64 },
    #[error("QP failure at theta = {theta:?}: {source}")]
    Qp { theta: Vec<f64>, source: QpError },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed table: {reason}")]
    Format { path: PathBuf, reason: String },
}

/// Axis-aligned box of explored parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaBox {
    pub lo: [f64; THETA_DIM],
    pub hi: [f64; THETA_DIM],
}

impl Default for ThetaBox {
    fn default() -> Self {
        Self {
            lo: [0.0, 0.0, 0.0, 0.2, -3.0],
            hi: [1.0, 1.0, 3.0, 1.0, 3.0],
        }
    }
}

impl ThetaBox {
    pub fn is_valid(&self) -> bool {
        self.lo
            .iter()
            .zip(&self.hi)
            .all(|(l, h)| l.is_finite() && h.is_finite() && l < h)
    }

    pub fn contains(&self, theta: &Theta, tol: f64) -> bool {
        (0..THETA_DIM).all(|i| theta[i] >= self.lo[i] - tol && theta[i] <= self.hi[i] + tol)
    }

    pub fn center(&self) -> Theta {
        Theta::from_fn(|i, _| 0.5 * (self.lo[i] + self.hi[i]))
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Theta {
        Theta::from_fn(|i, _| rng.random_range(self.lo[i]..self.hi[i]))
    }

    /// The box as `{theta : E theta <= e}`, two unit rows per coordinate.
    pub fn halfspaces(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut e = DMatrix::zeros(2 * THETA_DIM, THETA_DIM);
        let mut rhs = DVector::zeros(2 * THETA_DIM);
        for i in 0..THETA_DIM {
            e[(2 * i, i)] = 1.0;
            rhs[2 * i] = self.hi[i];
            e[(2 * i + 1, i)] = -1.0;
            rhs[2 * i + 1] = -self.lo[i];
        }
        (e, rhs)
    }
}

/// Affine optimizer and multipliers for a fixed active set.
#[derive(Debug, Clone)]
pub struct ActiveSetLaw {
    pub k: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lambda_gain: DMatrix<f64>,
    pub lambda_offset: DVector<f64>,
}

impl ActiveSetLaw {
    pub fn multipliers(&self, theta: &Theta) -> DVector<f64> {
        &self.lambda_gain * to_dvec(theta) + &self.lambda_offset
    }
}

pub(crate) fn to_dvec(theta: &Theta) -> DVector<f64> {
    DVector::from_column_slice(theta.as_slice())
}

/// Solves the KKT system of `problem` with `active` held as equalities,
/// symbolically in theta. `None` when the active rows are linearly
/// dependent.
pub fn active_set_law(problem: &MpqpProblem, active: &[usize]) -> Option<ActiveSetLaw> {
    let nu = problem.nu();
    let chol = problem.sigma.clone().cholesky()?;
    let sigma_inv_f = chol.solve(&problem.f);
    if active.is_empty() {
        return Some(ActiveSetLaw {
            k: -sigma_inv_f,
            g: DVector::zeros(nu),
            lambda_gain: DMatrix::zeros(0, THETA_DIM),
            lambda_offset: DVector::zeros(0),
        });
    }
    let na = active.len();
    let g_a = problem.g.select_rows(active);
    let s_a = problem.s.select_rows(active);
    let w_a = DVector::from_iterator(na, active.iter().map(|&i| problem.w[i]));
    let sigma_inv_gat = chol.solve(&g_a.transpose());
    let m = &g_a * &sigma_inv_gat;
    let m_chol = m.clone().cholesky()?;
    let diag_min = m_chol.l().diagonal().min();
    let diag_max = m_chol.l().diagonal().max();
    if !(diag_min > 1e-10 * diag_max.max(1.0)) {
        return None;
    }
    // lambda = -M^-1 ((S_A + G_A Sigma^-1 F) theta + W_A)
    let lambda_gain = -m_chol.solve(&(s_a + &g_a * &sigma_inv_f));
    let lambda_offset = -m_chol.solve(&w_a);
    // z = -Sigma^-1 (F theta + G_A' lambda)
    let k = -(&sigma_inv_f + &sigma_inv_gat * &lambda_gain);
    let g = -(&sigma_inv_gat * &lambda_offset);
    Some(ActiveSetLaw {
        k,
        g,
        lambda_gain,
        lambda_offset,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalRegion {
    /// Halfspace matrix, rows of unit norm.
    pub e_mat: DMatrix<f64>,
    pub e_vec: DVector<f64>,
    pub k: DMatrix<f64>,
    pub g: DVector<f64>,
    pub active_set: Vec<usize>,
    pub segment_index: usize,
}

impl CriticalRegion {
    pub fn n_facets(&self) -> usize {
        self.e_mat.nrows()
    }

    pub fn contains(&self, theta: &Theta, tol: f64) -> bool {
        (0..self.e_mat.nrows()).all(|i| {
            let mut acc = 0.0;
            for j in 0..THETA_DIM {
                acc += self.e_mat[(i, j)] * theta[j];
            }
            acc <= self.e_vec[i] + tol
        })
    }

    /// Full optimizer `K theta + g`.
    pub fn law(&self, theta: &Theta) -> DVector<f64> {
        &self.k * to_dvec(theta) + &self.g
    }

    /// First move only; this is all the controller needs.
    pub fn first_move(&self, theta: &Theta) -> f64 {
        let mut acc = self.g[0];
        for j in 0..THETA_DIM {
            acc += self.k[(0, j)] * theta[j];
        }
        acc
    }

    pub fn stored_reals(&self) -> usize {
        self.e_mat.len() + self.e_vec.len() + self.k.len() + self.g.len()
    }

    /// Chebyshev center and radius.
    pub fn chebyshev(&self) -> Option<(Theta, f64)> {
        match chebyshev_ball(&self.e_mat, &self.e_vec, None, 1e-12) {
            Feasibility::Feasible { witness, radius } => {
                Some((Theta::from_column_slice(witness.as_slice()), radius))
            }
            Feasibility::Infeasible => None,
        }
    }
}

/// Region of `active` intersected with `bbox`, or `None` if that set has
/// no interior.
pub fn region_from_active_set(
    problem: &MpqpProblem,
    active: &[usize],
    bbox: &ThetaBox,
) -> Option<CriticalRegion> {
    let law = active_set_law(problem, active)?;
    let inactive: Vec<usize> = (0..problem.n_constraints())
        .filter(|i| !active.contains(i))
        .collect();
    let (box_e, box_rhs) = bbox.halfspaces();
    let rows = active.len() + inactive.len() + box_e.nrows();
    let mut e_mat = DMatrix::zeros(rows, THETA_DIM);
    let mut e_vec = DVector::zeros(rows);
    let mut r = 0;
    // lambda(theta) >= 0
    for a in 0..active.len() {
        e_mat.set_row(r, &(-law.lambda_gain.row(a)));
        e_vec[r] = law.lambda_offset[a];
        r += 1;
    }
    // G_I (K theta + g) <= S_I theta + W_I
    for &i in &inactive {
        let gi = problem.g.row(i);
        e_mat.set_row(r, &(gi * &law.k - problem.s.row(i)));
        e_vec[r] = problem.w[i] - (gi * &law.g)[0];
        r += 1;
    }
    e_mat.view_mut((r, 0), (box_e.nrows(), THETA_DIM)).copy_from(&box_e);
    e_vec.rows_mut(r, box_rhs.len()).copy_from(&box_rhs);

    for i in 0..rows {
        let norm = e_mat.row(i).norm();
        if norm < 1e-12 && e_vec[i] < -1e-12 {
            return None;
        }
    }
    normalize_rows(&mut e_mat, &mut e_vec);
    match chebyshev_ball(&e_mat, &e_vec, None, 1e-12) {
        Feasibility::Feasible { radius, .. } if radius > MIN_RADIUS => {}
        _ => return None,
    }
    let (e_mat, e_vec, _) = remove_redundant(&e_mat, &e_vec, 1e-10);
    Some(CriticalRegion {
        e_mat,
        e_vec,
        k: law.k,
        g: law.g,
        active_set: active.to_vec(),
        segment_index: problem.segment_index,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreSettings {
    /// Distance stepped beyond a facet's Chebyshev center.
    pub epsilon: f64,
    /// Size of the random perturbation used on degenerate parameters.
    pub perturbation: f64,
    pub max_retries: usize,
    pub coverage_samples: usize,
    pub coverage_target: f64,
    pub seed: u64,
    pub max_regions: usize,
}

impl Default for ExploreSettings {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            perturbation: 1e-7,
            max_retries: 5,
            coverage_samples: 100_000,
            coverage_target: 0.999,
            seed: 7,
            max_regions: 5_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExploreReport {
    pub regions: usize,
    pub facets_stepped: usize,
    pub qp_solves: usize,
    pub perturbations: usize,
    pub failed_points: usize,
    pub repaired_holes: usize,
    pub coverage_feasible: usize,
    pub coverage_hits: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionStats {
    pub n_regions: usize,
    pub stored_reals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitSolution {
    pub segment_index: usize,
    pub nu: usize,
    pub theta_box: ThetaBox,
    pub regions: Vec<CriticalRegion>,
}

impl ExplicitSolution {
    pub fn empty(segment_index: usize, nu: usize, theta_box: ThetaBox) -> Self {
        Self {
            segment_index,
            nu,
            theta_box,
            regions: vec![],
        }
    }

    pub fn stats(&self) -> SolutionStats {
        SolutionStats {
            n_regions: self.regions.len(),
            stored_reals: self.regions.iter().map(CriticalRegion::stored_reals).sum(),
        }
    }

    /// Index of the first region containing `theta` within `tol`.
    pub fn locate_with_tol(&self, theta: &Theta, tol: f64) -> Option<usize> {
        if !self.theta_box.contains(theta, tol) {
            return None;
        }
        self.regions.iter().position(|r| r.contains(theta, tol))
    }

    pub fn locate(&self, theta: &Theta) -> Option<usize> {
        self.locate_with_tol(theta, LOCATE_TOL)
    }

    /// Optimizer from the first region containing `theta`.
    pub fn evaluate(&self, theta: &Theta) -> Option<DVector<f64>> {
        self.locate(theta).map(|i| self.regions[i].law(theta))
    }

    /// Copy with every stored real rounded to `decimals` places.
    pub fn rounded(&self, decimals: i32) -> Self {
        let scale = 10f64.powi(decimals);
        let round = |v: f64| (v * scale).round() / scale;
        let mut out = self.clone();
        for r in &mut out.regions {
            r.e_mat.apply(|v| *v = round(*v));
            r.e_vec.apply(|v| *v = round(*v));
            r.k.apply(|v| *v = round(*v));
            r.g.apply(|v| *v = round(*v));
        }
        out
    }
}

struct Explorer<'a> {
    problem: &'a MpqpProblem,
    bbox: ThetaBox,
    settings: ExploreSettings,
    qp: QpSettings,
    regions: Vec<CriticalRegion>,
    seen: BTreeSet<Vec<usize>>,
    report: ExploreReport,
    rng: ChaCha8Rng,
}

enum Attempt {
    Added(usize),
    Known,
    Infeasible,
    Failed,
}

impl<'a> Explorer<'a> {
    fn located(&self, theta: &Theta) -> bool {
        self.regions.iter().any(|r| r.contains(theta, 0.0))
    }

    fn perturbed(&mut self, theta: &Theta) -> Theta {
        let dir = Theta::from_fn(|_, _| StandardNormal.sample(&mut self.rng));
        let dir = dir / dir.norm().max(f64::MIN_POSITIVE);
        theta + dir * self.settings.perturbation
    }

    /// Solves the QP at `theta` and adds the region of its active set.
    /// Degenerate parameters are retried at random perturbations.
    fn attempt(&mut self, theta0: &Theta) -> Attempt {
        let mut theta = *theta0;
        for retry in 0..=self.settings.max_retries {
            if retry > 0 {
                self.report.perturbations += 1;
                theta = self.perturbed(theta0);
                if !self.bbox.contains(&theta, 0.0) {
                    continue;
                }
            }
            self.report.qp_solves += 1;
            let sol = match solve_qp(&self.problem.qp_at(&theta), &self.qp) {
                Ok(sol) => sol,
                Err(QpError::Infeasible) if retry == 0 => return Attempt::Infeasible,
                Err(_) => continue,
            };
            if self.seen.contains(&sol.active_set) {
                if retry == 0 {
                    return Attempt::Known;
                }
                continue;
            }
            if let Some(region) = region_from_active_set(self.problem, &sol.active_set, &self.bbox) {
                self.seen.insert(sol.active_set);
                self.regions.push(region);
                return Attempt::Added(self.regions.len() - 1);
            }
        }
        log::debug!(
            "segment {}: no region found near theta = {:?}",
            self.problem.segment_index,
            theta0.as_slice()
        );
        self.report.failed_points += 1;
        Attempt::Failed
    }

    /// Facet stepping from region `start` until the frontier is empty.
    fn flood(&mut self, start: usize) -> Result<(), EngineError> {
        let mut frontier = vec![start];
        while let Some(idx) = frontier.pop() {
            let region = self.regions[idx].clone();
            for facet in 0..region.n_facets() {
                let Feasibility::Feasible { witness, radius } =
                    chebyshev_ball(&region.e_mat, &region.e_vec, Some(facet), 1e-12)
                else {
                    continue;
                };
                if radius <= MIN_RADIUS {
                    continue;
                }
                let normal = region.e_mat.row(facet).transpose();
                let theta = Theta::from_column_slice((witness + normal * self.settings.epsilon).as_slice());
                if !self.bbox.contains(&theta, 0.0) || self.located(&theta) {
                    continue;
                }
                self.report.facets_stepped += 1;
                if let Attempt::Added(new) = self.attempt(&theta) {
                    if self.regions.len() > self.settings.max_regions {
                        return Err(EngineError::ExplorationStalled {
                            theta: theta.as_slice().to_vec(),
                            coverage: 0.0,
                        });
                    }
                    frontier.push(new);
                }
            }
        }
        Ok(())
    }

    fn is_feasible(&self, theta: &Theta) -> bool {
        let qp = self.problem.qp_at(theta);
        lp_feasible(&qp.g, &qp.w, 1e-9).is_feasible()
    }
}

/// Explores the critical regions of `problem` over `bbox`.
///
/// Facet stepping runs from the box center (or the first feasible random
/// point). A Monte-Carlo pass then repairs holes by seeding new floods from
/// uncovered feasible samples, and a second independent pass measures the
/// final coverage.
pub fn explore(
    problem: &MpqpProblem,
    bbox: &ThetaBox,
    settings: &ExploreSettings,
) -> Result<(ExplicitSolution, ExploreReport), EngineError> {
    let mut ex = Explorer {
        problem,
        bbox: *bbox,
        settings: *settings,
        qp: QpSettings::default(),
        regions: vec![],
        seen: BTreeSet::new(),
        report: ExploreReport::default(),
        rng: ChaCha8Rng::seed_from_u64(settings.seed),
    };
    let mut sampler = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(1));

    let center = bbox.center();
    let mut seeds = vec![center];
    seeds.extend((0..1000).map(|_| bbox.sample(&mut sampler)));
    for theta in &seeds {
        if !ex.regions.is_empty() {
            break;
        }
        if let Attempt::Added(i) = ex.attempt(theta) {
            ex.flood(i)?;
        }
    }

    let mut last_failure: Option<Theta> = None;
    for _ in 0..settings.coverage_samples {
        let theta = bbox.sample(&mut sampler);
        if ex.located(&theta) || !ex.is_feasible(&theta) {
            continue;
        }
        match ex.attempt(&theta) {
            Attempt::Added(i) => {
                ex.report.repaired_holes += 1;
                ex.flood(i)?;
            }
            Attempt::Failed => last_failure = Some(theta),
            _ => {}
        }
    }

    let solution = ExplicitSolution {
        segment_index: problem.segment_index,
        nu: problem.nu(),
        theta_box: *bbox,
        regions: ex.regions,
    };
    let (hits, feasible, miss) =
        coverage(problem, &solution, settings.coverage_samples, settings.seed.wrapping_add(2));
    let mut report = ex.report;
    report.regions = solution.regions.len();
    report.coverage_hits = hits;
    report.coverage_feasible = feasible;
    report.coverage = if feasible == 0 { 1.0 } else { hits as f64 / feasible as f64 };
    if report.coverage < settings.coverage_target {
        let theta = miss.or(last_failure).unwrap_or(center);
        return Err(EngineError::ExplorationStalled {
            theta: theta.as_slice().to_vec(),
            coverage: report.coverage,
        });
    }
    Ok((solution, report))
}

/// Monte-Carlo coverage over the feasible part of the box: returns
/// (located samples, feasible samples, first uncovered feasible sample).
pub fn coverage(
    problem: &MpqpProblem,
    solution: &ExplicitSolution,
    samples: usize,
    seed: u64,
) -> (usize, usize, Option<Theta>) {
    const CHUNK: usize = 1024;
    let chunks = samples.div_ceil(CHUNK);
    let parts = crate::par::map_range(chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let n = CHUNK.min(samples - c * CHUNK);
        let (mut hits, mut feasible, mut miss) = (0, 0, None);
        for _ in 0..n {
            let theta = solution.theta_box.sample(&mut rng);
            if solution.locate(&theta).is_some() {
                hits += 1;
                feasible += 1;
                continue;
            }
            let qp = problem.qp_at(&theta);
            if lp_feasible(&qp.g, &qp.w, 1e-9).is_feasible() {
                feasible += 1;
                miss.get_or_insert(theta);
            }
        }
        (hits, feasible, miss)
    });
    parts.into_iter().fold((0, 0, None), |(h, f, m), (h2, f2, m2)| (h + h2, f + f2, m.or(m2)))
}

/// Explores several problems, in parallel when enabled. Results keep the
/// input order.
pub fn explore_all(
    problems: &[MpqpProblem],
    bbox: &ThetaBox,
    settings: &ExploreSettings,
) -> Vec<Result<(ExplicitSolution, ExploreReport), EngineError>> {
    crate::par::map(problems, |p| explore(p, bbox, settings))
}

#[cfg(test)]
mod tests;
