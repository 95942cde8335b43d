use std::io;
use std::time::Instant;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Controller, ControllerKind, ControllerState, EkfState, StepDiagnostics};
use crate::model::{DiscreteModel, NdcParams, NdcState};
use crate::mpqp::MpcConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    State,
    Ekf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub enabled: bool,
    pub seed: u64,
    /// Variance of the additive noise on Vb and Vs per step.
    pub process_var: f64,
    /// Variance of the voltage measurement noise.
    pub measurement_var: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            seed: 1,
            process_var: 1e-6,
            measurement_var: 9e-6,
        }
    }
}

/// Everything a run needs besides the controller.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub params: NdcParams,
    pub model: DiscreteModel,
    pub mpc: MpcConfig,
    pub soc_start: f64,
    pub soc_target: f64,
    /// Charging is complete once SoC >= target - margin.
    pub completion_margin: f64,
    pub step_budget: usize,
    pub feedback: Feedback,
    pub noise: NoiseSpec,
    /// Added to the true initial state to form the filter's initial
    /// estimate.
    pub ekf_initial_error: [f64; 3],
    pub ekf_p0: f64,
    /// Process variance the filter assumes on the current channel.
    pub ekf_current_var: f64,
}

impl ClosedLoop {
    pub fn new(params: NdcParams, model: DiscreteModel, mpc: MpcConfig) -> Self {
        Self {
            params,
            model,
            mpc,
            soc_start: 0.2,
            soc_target: 0.9,
            completion_margin: 0.005,
            step_budget: 150,
            feedback: Feedback::State,
            noise: NoiseSpec::default(),
            ekf_initial_error: [0.0; 3],
            ekf_p0: 1e-6,
            ekf_current_var: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub time_s: f64,
    #[serde(rename = "Vb")]
    pub vb: f64,
    #[serde(rename = "Vs")]
    pub vs: f64,
    #[serde(rename = "I")]
    pub current: f64,
    #[serde(rename = "V")]
    pub voltage: f64,
    #[serde(rename = "SoC")]
    pub soc: f64,
    pub eta: f64,
    pub segment: usize,
    pub region: Option<usize>,
    pub du: f64,
    pub solver_time_ns: u64,
    pub fallback_flag: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub controller: ControllerKind,
    pub feedback: Feedback,
    pub rows: Vec<TraceRow>,
    pub completed: bool,
    pub fallback_count: usize,
    pub soc_target: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Filter innovations and their predicted variances (EKF runs only).
    #[serde(skip)]
    pub innovations: Vec<(f64, f64)>,
    /// Filter estimates per row (EKF runs only).
    #[serde(skip)]
    pub estimates: Vec<NdcState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub completed: bool,
    /// Steps until the completion condition held.
    pub charging_steps: Option<usize>,
    pub charging_time_s: Option<f64>,
    pub final_soc: f64,
    pub max_current: f64,
    pub min_current: f64,
    pub max_vs: f64,
    pub max_voltage: f64,
    /// Largest `(Vs - Vb) - (gamma1 SoC + gamma2)`.
    pub max_vs_vb_violation: f64,
    pub fallback_count: usize,
    pub mean_solver_time_ns: f64,
    pub max_solver_time_ns: u64,
}

impl SimTrace {
    pub fn soc(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.soc).collect()
    }

    pub fn currents(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.current).collect()
    }

    /// Controller timings of the rows where the controller ran.
    pub fn solver_times(&self) -> Vec<u64> {
        self.rows.iter().filter(|r| r.segment > 0).map(|r| r.solver_time_ns).collect()
    }

    pub fn summary(&self) -> TraceSummary {
        let fold = |f: fn(&TraceRow) -> f64, init: f64, pick: fn(f64, f64) -> f64| {
            self.rows.iter().map(f).fold(init, pick)
        };
        let times = self.solver_times();
        let charging_steps = self.completed.then(|| self.rows.len() - 1);
        let dt = match self.rows.get(1) {
            Some(r) => r.time_s,
            None => 0.0,
        };
        TraceSummary {
            completed: self.completed,
            charging_steps,
            charging_time_s: charging_steps.map(|n| n as f64 * dt),
            final_soc: self.rows.last().map_or(f64::NAN, |r| r.soc),
            max_current: fold(|r| r.current, f64::NEG_INFINITY, f64::max),
            min_current: fold(|r| r.current, f64::INFINITY, f64::min),
            max_vs: fold(|r| r.vs, f64::NEG_INFINITY, f64::max),
            max_voltage: fold(|r| r.voltage, f64::NEG_INFINITY, f64::max),
            max_vs_vb_violation: self
                .rows
                .iter()
                .map(|r| (r.vs - r.vb) - (self.gamma1 * r.soc + self.gamma2))
                .fold(f64::NEG_INFINITY, f64::max),
            fallback_count: self.fallback_count,
            mean_solver_time_ns: if times.is_empty() {
                0.0
            } else {
                times.iter().sum::<u64>() as f64 / times.len() as f64
            },
            max_solver_time_ns: times.iter().copied().max().unwrap_or(0),
        }
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Copy with the timing column zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut t = self.clone();
        for r in &mut t.rows {
            r.solver_time_ns = 0;
        }
        t
    }
}

/// Simulates plant, optional observer and controller until the target SoC
/// is reached or the step budget runs out.
pub fn run_closed_loop(cl: &ClosedLoop, controller: &mut dyn Controller) -> SimTrace {
    let params = &cl.params;
    let gamma1 = cl.mpc.gamma1;
    let mut rng = ChaCha8Rng::seed_from_u64(cl.noise.seed);
    let proc_noise = Normal::new(0.0, cl.noise.process_var.max(0.0).sqrt()).expect("finite variance");
    let meas_noise = Normal::new(0.0, cl.noise.measurement_var.max(0.0).sqrt()).expect("finite variance");

    let mut x = params.equilibrium(cl.soc_start);
    let mut ekf = (cl.feedback == Feedback::Ekf).then(|| {
        let e = cl.ekf_initial_error;
        let x0 = NdcState::new(x.vb + e[0], x.vs + e[1], x.current + e[2]);
        let q = Matrix3::from_diagonal(&nalgebra::Vector3::new(
            cl.noise.process_var,
            cl.noise.process_var,
            cl.ekf_current_var,
        ));
        EkfState::new(
            &x0,
            Matrix3::from_diagonal(&nalgebra::Vector3::new(cl.ekf_p0, cl.ekf_p0, cl.ekf_current_var)),
            q,
            cl.noise.measurement_var,
        )
    });

    let mut ctrl = ControllerState::default();
    let mut trace = SimTrace {
        controller: controller.kind(),
        feedback: cl.feedback,
        rows: Vec::with_capacity(cl.step_budget + 1),
        completed: false,
        fallback_count: 0,
        soc_target: cl.soc_target,
        gamma1,
        gamma2: cl.mpc.gamma2,
        innovations: vec![],
        estimates: vec![],
    };

    for step in 0..=cl.step_budget {
        let y = params.outputs(gamma1, &x);
        let mut row = TraceRow {
            step,
            time_s: step as f64 * cl.model.dt,
            vb: x.vb,
            vs: x.vs,
            current: x.current,
            voltage: y.voltage,
            soc: y.soc,
            eta: y.eta,
            segment: 0,
            region: None,
            du: 0.0,
            solver_time_ns: 0,
            fallback_flag: 0,
        };
        if let Some(f) = &ekf {
            trace.estimates.push(f.estimate());
        }
        if y.soc >= cl.soc_target - cl.completion_margin {
            trace.completed = true;
            trace.rows.push(row);
            break;
        }
        if step == cl.step_budget {
            trace.rows.push(row);
            break;
        }

        let feedback = ekf.as_ref().map_or(x, EkfState::estimate);
        let t0 = Instant::now();
        let (i_next, diag): (f64, StepDiagnostics) = controller.step(&mut ctrl, &feedback, cl.soc_target);
        row.solver_time_ns = t0.elapsed().as_nanos() as u64;
        row.segment = diag.segment;
        row.region = diag.region;
        row.du = diag.du;
        row.fallback_flag = diag.fallback as u8;
        trace.rows.push(row);

        let du = i_next - feedback.current;
        x = cl.model.propagate(&x, du);
        if cl.noise.enabled {
            x.vb += proc_noise.sample(&mut rng);
            x.vs += proc_noise.sample(&mut rng);
        }
        if let Some(f) = &mut ekf {
            let mut v = params.terminal_voltage(&x);
            if cl.noise.enabled {
                v += meas_noise.sample(&mut rng);
            }
            let inn = f.step(params, &cl.model, du, v);
            trace.innovations.push((inn.value, inn.variance));
        }
    }
    trace.fallback_count = ctrl.fallback_count;
    trace
}
