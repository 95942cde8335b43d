//! Online control: explicit lookup law, online QP and relinearizing NMPC
//! baselines, state estimation and the closed-loop simulator.

mod ekf;
mod sim;

pub use ekf::{EkfState, Innovation};
pub use sim::{
    run_closed_loop, ClosedLoop, Feedback, NoiseSpec, SimTrace, TraceRow, TraceSummary,
};

use nalgebra::{DVector, RowVector3};
use serde::{Deserialize, Serialize};

use crate::explicit::ExplicitSolution;
use crate::model::{DiscreteModel, NdcParams, NdcState};
use crate::mpqp::{assemble_theta, build, MpcConfig, MpqpProblem, Prediction, Theta};
use crate::qp::{solve_qp, QpSettings};
use crate::segments::{linearize_at, output_map, OutputMatrix, OutputOffset, SegmentTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Empc,
    #[serde(alias = "qp")]
    OnlineQp,
    Nmpc,
}

impl ControllerKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Empc => "empc",
            Self::OnlineQp => "qp",
            Self::Nmpc => "nmpc",
        }
    }
}

/// Which surface voltage picks the linear segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Vs at the sampling instant.
    Current,
    /// Vs one step ahead. It depends on the state only, and the voltage
    /// bound is imposed there, so the segment's upper-end linearization
    /// covers the constrained prediction.
    #[default]
    Predicted,
}

/// Selects segments for a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Scheduler {
    pub schedule: Schedule,
    a_vs: RowVector3<f64>,
}

impl Scheduler {
    pub fn new(schedule: Schedule, model: &DiscreteModel) -> Self {
        Self {
            schedule,
            a_vs: model.a_aug.row(1).into_owned(),
        }
    }

    pub fn vs(&self, x: &NdcState) -> f64 {
        match self.schedule {
            Schedule::Current => x.vs,
            Schedule::Predicted => (self.a_vs * x.to_vector())[0],
        }
    }

    pub fn position(&self, table: &SegmentTable, x: &NdcState) -> usize {
        table.select(self.vs(x)).position
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControllerState {
    /// Last applied current increment.
    pub u_prev: f64,
    pub i_applied: f64,
    pub step_index: usize,
    /// (segment position, region index) of the last successful lookup.
    pub last_region: Option<(usize, usize)>,
    pub fallback_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// 1-based segment index.
    pub segment: usize,
    pub region: Option<usize>,
    /// First optimal move, zero on fallback.
    pub du: f64,
    pub fallback: bool,
    pub iterations: usize,
    pub converged: bool,
}

pub trait Controller {
    fn kind(&self) -> ControllerKind;

    /// Returns the optimal first move for the feedback state, or `None`
    /// when no law applies.
    fn first_move(&mut self, x: &NdcState, r: f64, u_prev: f64, diag: &mut StepDiagnostics)
        -> Option<f64>;

    /// Current bounds used for the final saturation.
    fn current_limits(&self) -> (f64, f64);

    /// One receding-horizon step: computes and records the next current.
    fn step(&mut self, ctrl: &mut ControllerState, x: &NdcState, r: f64) -> (f64, StepDiagnostics) {
        let mut diag = StepDiagnostics::default();
        let u0 = match self.first_move(x, r, ctrl.u_prev, &mut diag) {
            Some(du) => {
                diag.du = du;
                ctrl.u_prev + du
            }
            None => {
                diag.fallback = true;
                ctrl.fallback_count += 1;
                log::warn!(
                    "step {}: no control law for theta = {:?}, holding current",
                    ctrl.step_index,
                    assemble_theta(x, r, ctrl.u_prev).as_slice()
                );
                0.0
            }
        };
        let (lo, hi) = self.current_limits();
        let i_next = (x.current + u0).clamp(lo, hi);
        ctrl.u_prev = i_next - x.current;
        ctrl.i_applied = i_next;
        ctrl.step_index += 1;
        if let Some(region) = diag.region {
            ctrl.last_region = Some((diag.segment - 1, region));
        }
        (i_next, diag)
    }
}

fn limits(cfg: &MpcConfig) -> (f64, f64) {
    (
        cfg.bounds.current.min.unwrap_or(f64::NEG_INFINITY),
        cfg.bounds.current.max.unwrap_or(f64::INFINITY),
    )
}

/// Lookup-table controller.
pub struct ExplicitController {
    pub table: SegmentTable,
    pub scheduler: Scheduler,
    /// One solution per segment, in table order.
    pub solutions: Vec<ExplicitSolution>,
    pub current_limits: (f64, f64),
}

impl ExplicitController {
    pub fn new(table: SegmentTable, solutions: Vec<ExplicitSolution>, cfg: &MpcConfig, scheduler: Scheduler) -> Self {
        assert_eq!(table.len(), solutions.len(), "one solution per segment");
        Self {
            table,
            scheduler,
            solutions,
            current_limits: limits(cfg),
        }
    }
}

impl Controller for ExplicitController {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Empc
    }

    fn current_limits(&self) -> (f64, f64) {
        self.current_limits
    }

    fn first_move(&mut self, x: &NdcState, r: f64, u_prev: f64, diag: &mut StepDiagnostics) -> Option<f64> {
        let pos = self.scheduler.position(&self.table, x);
        diag.segment = self.table.segments[pos].index;
        let theta = assemble_theta(x, r, u_prev);
        let sol = &self.solutions[pos];
        let region = sol.locate(&theta)?;
        diag.region = Some(region);
        diag.iterations = 1;
        diag.converged = true;
        Some(sol.regions[region].first_move(&theta))
    }
}

/// Solves the segment QP online at every step.
pub struct OnlineQpController {
    pub table: SegmentTable,
    pub scheduler: Scheduler,
    pub problems: Vec<MpqpProblem>,
    pub settings: QpSettings,
    pub current_limits: (f64, f64),
}

impl OnlineQpController {
    pub fn new(table: SegmentTable, model: &DiscreteModel, cfg: &MpcConfig, scheduler: Scheduler) -> Self {
        let problems = table
            .segments
            .iter()
            .map(|s| build(model, s, cfg, s.index).expect("validated config"))
            .collect();
        Self {
            table,
            scheduler,
            problems,
            settings: QpSettings::default(),
            current_limits: limits(cfg),
        }
    }
}

impl Controller for OnlineQpController {
    fn kind(&self) -> ControllerKind {
        ControllerKind::OnlineQp
    }

    fn current_limits(&self) -> (f64, f64) {
        self.current_limits
    }

    fn first_move(&mut self, x: &NdcState, r: f64, u_prev: f64, diag: &mut StepDiagnostics) -> Option<f64> {
        let pos = self.scheduler.position(&self.table, x);
        diag.segment = self.table.segments[pos].index;
        let theta = assemble_theta(x, r, u_prev);
        let sol = solve_qp(&self.problems[pos].qp_at(&theta), &self.settings).ok()?;
        diag.iterations = sol.iterations;
        diag.converged = true;
        Some(sol.z[0])
    }
}

/// Nonlinear MPC by successive linearization: the output map is
/// relinearized at the current Vs, then along the predicted Vs trajectory,
/// until the first move settles.
pub struct NmpcController {
    pub params: NdcParams,
    pub model: DiscreteModel,
    pub cfg: MpcConfig,
    /// Table used only to report the segment in diagnostics.
    pub table: SegmentTable,
    pub max_iters: usize,
    pub tol: f64,
    pub settings: QpSettings,
    /// First-move change per iteration of the last step.
    pub last_changes: Vec<f64>,
}

impl NmpcController {
    pub fn new(params: NdcParams, model: DiscreteModel, cfg: MpcConfig, table: SegmentTable, max_iters: usize) -> Self {
        assert!(max_iters >= 1);
        Self {
            params,
            model,
            cfg,
            table,
            max_iters,
            tol: 1e-6,
            settings: QpSettings::default(),
            last_changes: vec![],
        }
    }

    fn maps_along(&self, vs: &[f64]) -> Vec<(OutputMatrix, OutputOffset)> {
        vs.iter()
            .map(|&v| output_map(&self.params, &linearize_at(&self.params, v), self.cfg.gamma1))
            .collect()
    }

    /// Predicted Vs over `0..=N` for the move sequence `z`.
    fn predicted_vs(&self, pred: &Prediction, theta: &Theta, z: &DVector<f64>) -> Vec<f64> {
        pred.x_theta
            .iter()
            .zip(&pred.x_z)
            .map(|(xt, xz)| (xt * theta)[1] + (xz.row(1) * z)[0])
            .collect()
    }
}

impl Controller for NmpcController {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Nmpc
    }

    fn current_limits(&self) -> (f64, f64) {
        limits(&self.cfg)
    }

    fn first_move(&mut self, x: &NdcState, r: f64, u_prev: f64, diag: &mut StepDiagnostics) -> Option<f64> {
        diag.segment = self.table.segments[self.table.select(x.vs).position].index;
        let theta = assemble_theta(x, r, u_prev);
        let pred = Prediction::new(&self.model, self.cfg.horizon, self.cfg.input_horizon);
        let mut vs_traj = vec![x.vs; self.cfg.horizon + 1];
        let mut last: Option<f64> = None;
        self.last_changes.clear();
        for iter in 1..=self.max_iters {
            let maps = self.maps_along(&vs_traj);
            let problem = build(&self.model, maps.as_slice(), &self.cfg, diag.segment).ok()?;
            let sol = match solve_qp(&problem.qp_at(&theta), &self.settings) {
                Ok(sol) => sol,
                Err(_) if last.is_some() => break,
                Err(_) => return None,
            };
            diag.iterations = iter;
            let du = sol.z[0];
            vs_traj = self.predicted_vs(&pred, &theta, &sol.z);
            if let Some(prev) = last {
                let change = (du - prev).abs();
                self.last_changes.push(change);
                if change < self.tol {
                    diag.converged = true;
                    return Some(du);
                }
            }
            last = Some(du);
        }
        if !diag.converged {
            log::debug!("nmpc: no convergence after {} iterations", self.max_iters);
        }
        last
    }
}

#[cfg(test)]
mod tests;
