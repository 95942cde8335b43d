//! Condensing of the per-segment linear MPC problem into the
//! multiparametric form
//!
//! ```text
//! min_z 1/2 z' Sigma z + (F theta)' z     s.t.  G z <= S theta + W
//! ```
//!
//! with `z` the input moves over the input horizon and
//! `theta = [Vb, Vs, I, r, u_prev]`.

use nalgebra::{DMatrix, DVector, Matrix3, RowSVector, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DiscreteModel, NdcState};
use crate::qp::DenseQp;
use crate::segments::{
    LinearSegment, OutputMatrix, OutputOffset, Y_CURRENT, Y_ETA, Y_SOC, Y_VOLTAGE, Y_VS,
};

pub const THETA_DIM: usize = 5;
pub type Theta = SVector<f64, THETA_DIM>;

/// Parameter vector `[Vb, Vs, I, r, u_prev]`.
pub fn assemble_theta(x: &NdcState, r: f64, u_prev: f64) -> Theta {
    Theta::new(x.vb, x.vs, x.current, r, u_prev)
}

/// Inverse of [`assemble_theta`].
pub fn split_theta(theta: &Theta) -> (NdcState, f64, f64) {
    (
        NdcState::new(theta[0], theta[1], theta[2]),
        theta[3],
        theta[4],
    )
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid horizon: {0}")]
    Horizon(String),
    #[error("invalid weight: {0}")]
    Weight(String),
    #[error("bounds for `{output}` are inconsistent: min {min} >= max {max}")]
    Bounds { output: &'static str, min: f64, max: f64 },
    #[error("gamma1 must be <= 0 and gamma2 >= 0 (got {gamma1}, {gamma2})")]
    Gamma { gamma1: f64, gamma2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bound {
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

impl Bound {
    pub const fn new(min: Option<f64>, max: Option<f64>) -> Self {
        Self { min, max }
    }

    fn count(&self) -> usize {
        self.min.is_some() as usize + self.max.is_some() as usize
    }
}

/// Output bounds. The eta bound is `eta <= gamma2` and lives in
/// [`MpcConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBounds {
    pub soc: Bound,
    pub vs: Bound,
    pub current: Bound,
    pub voltage: Bound,
}

impl Default for OutputBounds {
    fn default() -> Self {
        Self {
            soc: Bound::default(),
            vs: Bound::new(None, Some(0.95)),
            current: Bound::new(Some(0.0), Some(3.0)),
            voltage: Bound::new(None, Some(4.2)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Prediction horizon N.
    pub horizon: usize,
    /// Input horizon Nu; moves after it are zero.
    pub input_horizon: usize,
    /// Constraint horizon of the eta constraint.
    pub eta_horizon: usize,
    /// Constraint horizon of all other output constraints.
    pub other_horizon: usize,
    pub q_weight: f64,
    pub r_weight: f64,
    pub bounds: OutputBounds,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            input_horizon: 2,
            eta_horizon: 2,
            other_horizon: 1,
            q_weight: 1.0,
            r_weight: 0.1,
            bounds: OutputBounds::default(),
            gamma1: -0.04,
            gamma2: 0.08,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.horizon;
        if n == 0 {
            return Err(ConfigError::Horizon("prediction horizon must be >= 1".into()));
        }
        if !(1..=n).contains(&self.input_horizon) {
            return Err(ConfigError::Horizon(format!(
                "input horizon {} not in 1..={n}",
                self.input_horizon
            )));
        }
        for (name, nc) in [("eta", self.eta_horizon), ("other", self.other_horizon)] {
            if !(1..=n).contains(&nc) {
                return Err(ConfigError::Horizon(format!(
                    "{name} constraint horizon {nc} not in 1..={n}"
                )));
            }
        }
        if !(self.q_weight >= 0.0) || !self.q_weight.is_finite() {
            return Err(ConfigError::Weight(format!("Q = {} must be >= 0", self.q_weight)));
        }
        if !(self.r_weight > 0.0) || !self.r_weight.is_finite() {
            return Err(ConfigError::Weight(format!("R = {} must be > 0", self.r_weight)));
        }
        if !(self.gamma1 <= 0.0 && self.gamma2 >= 0.0) {
            return Err(ConfigError::Gamma {
                gamma1: self.gamma1,
                gamma2: self.gamma2,
            });
        }
        for (output, b) in self.named_bounds() {
            if let (Some(min), Some(max)) = (b.min, b.max) {
                if !(min < max) {
                    return Err(ConfigError::Bounds { output, min, max });
                }
            }
        }
        Ok(())
    }

    fn named_bounds(&self) -> [(&'static str, Bound); 4] {
        [
            ("soc", self.bounds.soc),
            ("vs", self.bounds.vs),
            ("current", self.bounds.current),
            ("voltage", self.bounds.voltage),
        ]
    }

    /// Bound on output row `row` of y.
    pub fn bound(&self, row: usize) -> Bound {
        match row {
            Y_SOC => self.bounds.soc,
            Y_VS => self.bounds.vs,
            Y_CURRENT => self.bounds.current,
            Y_VOLTAGE => self.bounds.voltage,
            Y_ETA => Bound::new(None, Some(self.gamma2)),
            _ => Bound::default(),
        }
    }

    pub fn constraint_horizon(&self, row: usize) -> usize {
        if row == Y_ETA {
            self.eta_horizon
        } else {
            self.other_horizon
        }
    }

    /// Number of candidate bound rows before z-independent rows are
    /// dropped.
    pub fn candidate_rows(&self) -> usize {
        (0..5)
            .map(|row| self.bound(row).count() * self.constraint_horizon(row))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Upper,
    Lower,
}

/// Origin of one constraint row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintTag {
    /// Output row of y (see the `Y_*` constants).
    pub output: usize,
    /// Prediction step the bound applies to.
    pub step: usize,
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpqpProblem {
    pub sigma: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub w: DVector<f64>,
    /// `1/2 theta' Y theta` is the part of the cost that does not depend on
    /// `z`.
    pub theta_cost: SMatrix<f64, THETA_DIM, THETA_DIM>,
    pub tags: Vec<ConstraintTag>,
    /// Bound rows that do not depend on `z` and were left out.
    pub dropped_rows: Vec<ConstraintTag>,
    pub segment_index: usize,
}

impl MpqpProblem {
    pub fn nu(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn n_constraints(&self) -> usize {
        self.g.nrows()
    }

    /// The QP at a fixed parameter.
    pub fn qp_at(&self, theta: &Theta) -> DenseQp {
        let th = DVector::from_column_slice(theta.as_slice());
        DenseQp {
            h: self.sigma.clone(),
            f: &self.f * &th,
            g: self.g.clone(),
            w: &self.s * &th + &self.w,
        }
    }

    /// Full cost including the theta-only part.
    pub fn cost(&self, theta: &Theta, z: &DVector<f64>) -> f64 {
        let th = DVector::from_column_slice(theta.as_slice());
        0.5 * z.dot(&(&self.sigma * z))
            + (&self.f * &th).dot(z)
            + 0.5 * theta.dot(&(self.theta_cost * theta))
    }
}

/// Output maps per prediction step, `0..=N`.
pub trait OutputMaps {
    fn at(&self, step: usize) -> (&OutputMatrix, &OutputOffset);
}

impl OutputMaps for LinearSegment {
    fn at(&self, _step: usize) -> (&OutputMatrix, &OutputOffset) {
        (&self.c_mat, &self.d_vec)
    }
}

impl OutputMaps for [(OutputMatrix, OutputOffset)] {
    fn at(&self, step: usize) -> (&OutputMatrix, &OutputOffset) {
        let (c, d) = &self[step.min(self.len() - 1)];
        (c, d)
    }
}

/// Predicted state `x_k = Xt[k] theta + Xz[k] z` for `k = 0..=N`.
pub struct Prediction {
    pub x_theta: Vec<SMatrix<f64, 3, THETA_DIM>>,
    pub x_z: Vec<DMatrix<f64>>,
}

impl Prediction {
    pub fn new(model: &DiscreteModel, horizon: usize, input_horizon: usize) -> Self {
        let a: Matrix3<f64> = model.a_aug;
        let b: Vector3<f64> = model.b_aug;
        let mut x_theta = Vec::with_capacity(horizon + 1);
        let mut x_z = Vec::with_capacity(horizon + 1);
        let mut xt = SMatrix::<f64, 3, THETA_DIM>::zeros();
        xt.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        let mut xz = DMatrix::<f64>::zeros(3, input_horizon);
        x_theta.push(xt);
        x_z.push(xz.clone());
        for k in 0..horizon {
            // u_k = u_prev + sum_{j <= min(k, Nu-1)} z_j
            let mut next_t = a * xt;
            for r in 0..3 {
                next_t[(r, 4)] += b[r];
            }
            let mut next_z = DMatrix::from_fn(3, input_horizon, |r, c| {
                (0..3).map(|i| a[(r, i)] * xz[(i, c)]).sum::<f64>()
            });
            for j in 0..input_horizon.min(k + 1) {
                for r in 0..3 {
                    next_z[(r, j)] += b[r];
                }
            }
            xt = next_t;
            xz = next_z;
            x_theta.push(xt);
            x_z.push(xz.clone());
        }
        Self { x_theta, x_z }
    }
}

/// Condenses the linear MPC problem on `maps`.
///
/// The tracking cost runs over `k = 0..N-1`. Output bounds are imposed on
/// the predicted outputs `y_1 .. y_Nc`; `y_0` is fixed by the parameter. Rows
/// that do not depend on `z` are dropped and listed in `dropped_rows`.
pub fn build<M: OutputMaps + ?Sized>(
    model: &DiscreteModel,
    maps: &M,
    cfg: &MpcConfig,
    segment_index: usize,
) -> Result<MpqpProblem, ConfigError> {
    cfg.validate()?;
    let n = cfg.horizon;
    let nu = cfg.input_horizon;
    let pred = Prediction::new(model, n, nu);

    let mut r4 = RowSVector::<f64, THETA_DIM>::zeros();
    r4[3] = 1.0;

    let mut sigma = DMatrix::<f64>::identity(nu, nu) * cfg.r_weight;
    let mut f = DMatrix::<f64>::zeros(nu, THETA_DIM);
    let mut theta_cost = SMatrix::<f64, THETA_DIM, THETA_DIM>::zeros();
    for k in 0..n {
        let (c, d) = maps.at(k);
        debug_assert_eq!(d[Y_SOC], 0.0);
        let c_soc = c.row(Y_SOC);
        // SoC_k - r = s_k z + a_k theta
        let s_k = c_soc * &pred.x_z[k];
        let a_k = c_soc * pred.x_theta[k] - r4;
        sigma += s_k.transpose() * &s_k * cfg.q_weight;
        f += s_k.transpose() * DMatrix::from_row_slice(1, THETA_DIM, a_k.as_slice()) * cfg.q_weight;
        theta_cost += a_k.transpose() * a_k * cfg.q_weight;
    }

    let max_step = cfg.eta_horizon.max(cfg.other_horizon);
    let mut g_rows: Vec<DVector<f64>> = vec![];
    let mut s_rows: Vec<[f64; THETA_DIM]> = vec![];
    let mut w_vals = vec![];
    let mut tags = vec![];
    let mut dropped_rows = vec![];
    for step in 1..=max_step {
        let (c, d) = maps.at(step);
        for output in 0..5 {
            if step > cfg.constraint_horizon(output) {
                continue;
            }
            let bound = cfg.bound(output);
            let row = c.row(output);
            let gz = (row * &pred.x_z[step]).transpose();
            let gt = row * pred.x_theta[step];
            let z_free = gz.amax() <= 1e-12 * row.amax().max(1.0);
            for (side, limit) in [(Side::Upper, bound.max), (Side::Lower, bound.min)] {
                let Some(limit) = limit else { continue };
                let tag = ConstraintTag { output, step, side };
                if z_free {
                    dropped_rows.push(tag);
                    continue;
                }
                let sign = if side == Side::Upper { 1.0 } else { -1.0 };
                g_rows.push(&gz * sign);
                let mut srow = [0.0; THETA_DIM];
                for (i, v) in srow.iter_mut().enumerate() {
                    *v = -sign * gt[i];
                }
                s_rows.push(srow);
                w_vals.push(sign * (limit - d[output]));
                tags.push(tag);
            }
        }
    }

    let m = g_rows.len();
    let g = DMatrix::from_fn(m, nu, |r, c| g_rows[r][c]);
    let s = DMatrix::from_fn(m, THETA_DIM, |r, c| s_rows[r][c]);
    let w = DVector::from_vec(w_vals);
    Ok(MpqpProblem {
        sigma,
        f,
        g,
        s,
        w,
        theta_cost,
        tags,
        dropped_rows,
        segment_index,
    })
}

#[derive(Serialize)]
struct ProblemExport<'a> {
    segment_index: usize,
    nu: usize,
    theta_dim: usize,
    sigma: Vec<Vec<f64>>,
    f: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    w: Vec<f64>,
    tags: &'a [ConstraintTag],
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl MpqpProblem {
    /// Matrices as JSON for checking against external tools.
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(&ProblemExport {
            segment_index: self.segment_index,
            nu: self.nu(),
            theta_dim: THETA_DIM,
            sigma: rows_of(&self.sigma),
            f: rows_of(&self.f),
            g: rows_of(&self.g),
            s: rows_of(&self.s),
            w: self.w.iter().copied().collect(),
            tags: &self.tags,
        })
    }
}
