//! Command implementations behind the `ndc-empc` binary: synthesis, runs,
//! sweeps, benchmarks, table conversion and verification.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explicit::{
    export_table, import_table, EngineError, ExplicitSolution, ExploreReport, TableFile, TableFormat, LOCATE_TOL,
};
use crate::fsutil::write_atomic;
use crate::mpqp::MpqpProblem;
use crate::pipeline::{Plant, SynthesisError};
use crate::qp::{solve_qp, QpError, QpSettings};
use crate::runtime::{
    run_closed_loop, ClosedLoop, Controller, ControllerKind, ExplicitController, Feedback, NmpcController,
    OnlineQpController, Scheduler, SimTrace, TraceSummary,
};
use crate::scenario::{self, BenchSet, ConfigError, ConfigFile, Scenario};

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Table(#[from] EngineError),
    #[error("{0}")]
    Setup(String),
    #[error("synthesis failed: {0}")]
    Synthesis(String),
    #[error("charging incomplete: {}", .0.join(", "))]
    IncompleteCharge(Vec<String>),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl AppError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::IncompleteCharge(_) => 2,
            Self::Synthesis(_) => 3,
            Self::Verification(_) => 4,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AppError + '_ {
    move |source| AppError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), AppError> {
    write_atomic(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), AppError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_file(path, text.as_bytes())
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub controller: Option<ControllerKind>,
    pub feedback: Option<Feedback>,
    pub repeats: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, s: &mut Scenario) {
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if let Some(c) = self.controller {
            s.controller = c;
        }
        if let Some(f) = self.feedback {
            s.feedback = f;
        }
    }
}

pub fn plant_for(s: &Scenario) -> Result<Plant, AppError> {
    Plant::new(s.params()?, &s.breakpoints()?, s.mpc.clone(), s.dt).map_err(|e| AppError::Setup(e.to_string()))
}

pub fn closed_loop_for(s: &Scenario, plant: &Plant) -> ClosedLoop {
    let mut cl = ClosedLoop::new(plant.params.clone(), plant.model.clone(), plant.mpc.clone());
    cl.soc_start = s.soc_start;
    cl.soc_target = s.soc_target;
    cl.completion_margin = s.completion_margin;
    cl.step_budget = s.step_budget;
    cl.feedback = s.feedback;
    cl.noise = s.noise_spec();
    cl.ekf_initial_error = s.ekf.initial_error;
    cl.ekf_p0 = s.ekf.p0;
    cl.ekf_current_var = s.ekf.current_var;
    cl
}

fn synthesis_failure(e: SynthesisError) -> AppError {
    match e {
        SynthesisError::Explore { .. } => AppError::Synthesis(e.to_string()),
        other => AppError::Setup(other.to_string()),
    }
}

/// Lookup tables for a scenario: read from `tables` when given, otherwise
/// synthesized in memory. Rounded when the scenario asks for it.
pub fn solutions_for(s: &Scenario, plant: &Plant) -> Result<Vec<ExplicitSolution>, AppError> {
    let solutions = match s.tables_path() {
        Some(path) => {
            let table = load_tables(&path)?;
            check_tables(&table, plant, &path)?;
            table.solutions
        }
        None => plant
            .synthesize(&s.synthesis.theta_box, &s.explore_settings())
            .map_err(synthesis_failure)?
            .into_iter()
            .map(|o| o.solution)
            .collect(),
    };
    Ok(match s.table_rounding {
        Some(d) => solutions.iter().map(|sol| sol.rounded(d)).collect(),
        None => solutions,
    })
}

/// Reads one table file, or every `segment_*.json` (else `segment_*.bin`)
/// file of a directory in name order.
pub fn load_tables(path: &Path) -> Result<TableFile, AppError> {
    if !path.is_dir() {
        return Ok(import_table(path)?);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("segment_")))
        .collect();
    files.sort();
    let ext = |e: &str| files.iter().filter(|p| p.extension().is_some_and(|x| x == e)).cloned().collect::<Vec<_>>();
    let chosen = match ext("json") {
        v if !v.is_empty() => v,
        _ => ext("bin"),
    };
    if chosen.is_empty() {
        return Err(AppError::Setup(format!("{}: no segment_* table files", path.display())));
    }
    let mut solutions = vec![];
    let mut locate_tol = LOCATE_TOL;
    let mut rounding = None;
    for f in &chosen {
        let t = import_table(f)?;
        locate_tol = t.locate_tol;
        rounding = t.rounding;
        solutions.extend(t.solutions);
    }
    Ok(TableFile {
        locate_tol,
        rounding,
        solutions,
    })
}

fn check_tables(table: &TableFile, plant: &Plant, path: &Path) -> Result<(), AppError> {
    let bad = |reason: String| AppError::Setup(format!("{}: {reason}", path.display()));
    if table.solutions.len() != plant.problems.len() {
        return Err(bad(format!(
            "{} tables for {} segments",
            table.solutions.len(),
            plant.problems.len()
        )));
    }
    for (sol, p) in table.solutions.iter().zip(&plant.problems) {
        if sol.segment_index != p.segment_index || sol.nu != p.nu() {
            return Err(bad(format!(
                "table for segment {} (nu {}) does not match segment {} (nu {})",
                sol.segment_index,
                sol.nu,
                p.segment_index,
                p.nu()
            )));
        }
    }
    Ok(())
}

pub fn controller_for(
    s: &Scenario,
    plant: &Plant,
    solutions: Option<Vec<ExplicitSolution>>,
) -> Result<Box<dyn Controller>, AppError> {
    let scheduler = Scheduler::new(s.schedule, &plant.model);
    Ok(match s.controller {
        ControllerKind::Empc => {
            let solutions = match solutions {
                Some(v) => v,
                None => solutions_for(s, plant)?,
            };
            Box::new(ExplicitController::new(plant.table.clone(), solutions, &plant.mpc, scheduler))
        }
        ControllerKind::OnlineQp => Box::new(OnlineQpController::new(
            plant.table.clone(),
            &plant.model,
            &plant.mpc,
            scheduler,
        )),
        ControllerKind::Nmpc => Box::new(NmpcController::new(
            plant.params.clone(),
            plant.model.clone(),
            plant.mpc.clone(),
            plant.table.clone(),
            s.nmpc_max_iters,
        )),
    })
}

/// Runs one scenario in memory.
pub fn simulate(s: &Scenario) -> Result<SimTrace, AppError> {
    let plant = plant_for(s)?;
    let mut controller = controller_for(s, &plant, None)?;
    Ok(run_closed_loop(&closed_loop_for(s, &plant), controller.as_mut()))
}

/// Largest absolute SoC difference at equal steps; the shorter trace is
/// held at its final value.
pub fn max_soc_deviation(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    (0..a.len().max(b.len()))
        .map(|k| (a[k.min(a.len() - 1)] - b[k.min(b.len() - 1)]).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub index: usize,
    pub vs_lo: f64,
    pub vs_hi: f64,
    pub vs_op: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub r0: f64,
    pub n_regions: Option<usize>,
    pub stored_reals: Option<usize>,
    pub wall_time_s: f64,
    pub explore: Option<ExploreReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub scenario: String,
    pub seed: u64,
    pub parallel: bool,
    pub total_regions: usize,
    pub total_stored_reals: usize,
    pub wall_time_s: f64,
    pub segments: Vec<SegmentReport>,
}

/// Explores every segment and writes `tables/segment_XX.{json,bin}`,
/// `segments.json` and `synthesis_report.json` under `out_dir`. The report
/// is written even when a segment fails.
pub fn synthesize(s: &Scenario, out_dir: &Path) -> Result<SynthesisReport, AppError> {
    let plant = plant_for(s)?;
    let t0 = Instant::now();
    let outcomes = plant.synthesize_each(&s.synthesis.theta_box, &s.explore_settings());
    let wall = t0.elapsed().as_secs_f64();

    let tables = out_dir.join("tables");
    let mut segments = vec![];
    let mut failures = vec![];
    for (seg, outcome) in plant.table.segments.iter().zip(outcomes) {
        let mut row = SegmentReport {
            index: seg.index,
            vs_lo: seg.vs_lo,
            vs_hi: seg.vs_hi,
            vs_op: seg.vs_op,
            lambda1: seg.lambda1,
            lambda2: seg.lambda2,
            r0: seg.r0_const,
            n_regions: None,
            stored_reals: None,
            wall_time_s: 0.0,
            explore: None,
            error: None,
        };
        match outcome {
            Ok(o) => {
                let stats = o.solution.stats();
                row.n_regions = Some(stats.n_regions);
                row.stored_reals = Some(stats.stored_reals);
                row.wall_time_s = o.wall_time.as_secs_f64();
                row.explore = Some(o.report);
                let file = TableFile::new(vec![o.solution]);
                let stem = format!("segment_{:02}", seg.index);
                export_table(&file, &tables.join(format!("{stem}.json")), TableFormat::Json)?;
                export_table(&file, &tables.join(format!("{stem}.bin")), TableFormat::Binary)?;
            }
            Err(e) => {
                log::error!("{e}");
                row.error = Some(e.to_string());
                failures.push(e.to_string());
            }
        }
        segments.push(row);
    }
    let report = SynthesisReport {
        scenario: s.name.clone(),
        seed: s.seed,
        parallel: crate::par::is_parallel(),
        total_regions: segments.iter().filter_map(|r| r.n_regions).sum(),
        total_stored_reals: segments.iter().filter_map(|r| r.stored_reals).sum(),
        wall_time_s: wall,
        segments,
    };
    let seg_json = plant.table.to_json().expect("segment table serializes");
    write_file(&out_dir.join("segments.json"), seg_json.as_bytes())?;
    write_json(&out_dir.join("synthesis_report.json"), &report)?;
    if failures.is_empty() {
        Ok(report)
    } else {
        Err(AppError::Synthesis(failures.join("; ")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub controller: ControllerKind,
    pub feedback: Feedback,
    pub seed: u64,
    #[serde(flatten)]
    pub summary: TraceSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub scenario: String,
    pub completed: bool,
    pub charging_steps: Option<usize>,
    pub charging_time_s: Option<f64>,
    pub final_soc: f64,
    /// Against the first variant.
    pub max_soc_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub entries: Vec<SweepEntry>,
}

pub struct RunOutput {
    pub traces: Vec<(Scenario, SimTrace)>,
    pub sweep: Option<SweepReport>,
}

/// Runs a scenario, or every variant of a sweep in parallel, and writes
/// `<name>.csv` and `<name>_summary.json` per run (plus
/// `<sweep>_sweep.json`). Incomplete charges are reported after all
/// outputs are written.
pub fn run(config: &Path, out_dir: &Path, ov: &Overrides) -> Result<RunOutput, AppError> {
    let (name, mut scenarios) = match scenario::load(config)? {
        ConfigFile::Scenario(s) => (None, vec![s]),
        ConfigFile::Sweep(sw) => (Some(sw.name), sw.scenarios),
        ConfigFile::Bench(_) => return Err(AppError::Setup("run expects a scenario or sweep file".into())),
    };
    for s in &mut scenarios {
        ov.apply(s);
    }
    let traces = crate::par::map(&scenarios, simulate).into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut incomplete = vec![];
    for (s, trace) in scenarios.iter().zip(&traces) {
        let mut csv = Vec::new();
        trace.write_csv(&mut csv).map_err(|e| AppError::Setup(e.to_string()))?;
        write_file(&out_dir.join(format!("{}.csv", s.name)), &csv)?;
        let summary = RunSummary {
            scenario: s.name.clone(),
            controller: trace.controller,
            feedback: trace.feedback,
            seed: s.seed,
            summary: trace.summary(),
        };
        write_json(&out_dir.join(format!("{}_summary.json", s.name)), &summary)?;
        if !trace.completed {
            incomplete.push(s.name.clone());
        }
    }
    let sweep = name.map(|name| {
        let base = traces[0].soc();
        SweepReport {
            name,
            entries: scenarios
                .iter()
                .zip(&traces)
                .map(|(s, t)| {
                    let sum = t.summary();
                    SweepEntry {
                        scenario: s.name.clone(),
                        completed: sum.completed,
                        charging_steps: sum.charging_steps,
                        charging_time_s: sum.charging_time_s,
                        final_soc: sum.final_soc,
                        max_soc_deviation: max_soc_deviation(&base, &t.soc()),
                    }
                })
                .collect(),
        }
    });
    if let Some(sw) = &sweep {
        write_json(&out_dir.join(format!("{}_sweep.json", sw.name)), sw)?;
    }
    if !incomplete.is_empty() {
        return Err(AppError::IncompleteCharge(incomplete));
    }
    Ok(RunOutput {
        traces: scenarios.into_iter().zip(traces).collect(),
        sweep,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scenario: String,
    pub controller: ControllerKind,
    pub horizon: usize,
    pub input_horizon: usize,
    pub eta_horizon: usize,
    pub repeats: usize,
    pub completed: bool,
    pub charging_steps: Option<usize>,
    /// Controller steps per run.
    pub steps: usize,
    pub mean_step_ns: f64,
    pub max_step_ns: u64,
    /// Controller time per run, averaged over the repeats.
    pub mean_run_controller_ns: f64,
    /// Wall time of all repeats including simulation.
    pub total_wall_s: f64,
    pub max_voltage: f64,
    pub max_vs: f64,
    pub max_vs_vb_violation: f64,
    pub fallback_count: usize,
    /// Critical regions per segment (explicit controller only).
    pub regions: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedRatio {
    pub scenario: String,
    pub empc_mean_step_ns: f64,
    pub nmpc_mean_step_ns: f64,
    /// NMPC time over eMPC time.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub name: String,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
    pub ratios: Vec<SpeedRatio>,
    /// Max over min eMPC mean step time across scenarios.
    pub empc_spread: Option<f64>,
}

impl BenchReport {
    /// Copy with every timing field zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.rows {
            row.mean_step_ns = 0.0;
            row.max_step_ns = 0;
            row.mean_run_controller_ns = 0.0;
            row.total_wall_s = 0.0;
        }
        for q in &mut r.ratios {
            q.empc_mean_step_ns = 0.0;
            q.nmpc_mean_step_ns = 0.0;
            q.speedup = 0.0;
        }
        r.empc_spread = None;
        r
    }
}

/// Times every controller on every scenario. Runs are sequential so that
/// timings do not compete for cores; tables are synthesized once per
/// scenario outside the timed region.
pub fn bench(set: &BenchSet) -> Result<BenchReport, AppError> {
    let mut rows = vec![];
    for s in &set.scenarios {
        let plant = plant_for(s)?;
        let solutions = match set.controllers.contains(&ControllerKind::Empc) {
            true => Some(solutions_for(s, &plant)?),
            false => None,
        };
        for &kind in &set.controllers {
            let mut sc = s.clone();
            sc.controller = kind;
            let cl = closed_loop_for(&sc, &plant);
            let t0 = Instant::now();
            let mut times: Vec<u64> = vec![];
            let mut last = None;
            for _ in 0..set.repeats {
                let mut c = controller_for(&sc, &plant, solutions.clone())?;
                let trace = run_closed_loop(&cl, c.as_mut());
                times.extend(trace.solver_times());
                last = Some(trace);
            }
            let total_wall_s = t0.elapsed().as_secs_f64();
            let trace = last.expect("repeats >= 1");
            let sum = trace.summary();
            let steps = trace.solver_times().len();
            let mean = times.iter().sum::<u64>() as f64 / times.len().max(1) as f64;
            rows.push(BenchRow {
                scenario: s.name.clone(),
                controller: kind,
                horizon: s.mpc.horizon,
                input_horizon: s.mpc.input_horizon,
                eta_horizon: s.mpc.eta_horizon,
                repeats: set.repeats,
                completed: sum.completed,
                charging_steps: sum.charging_steps,
                steps,
                mean_step_ns: mean,
                max_step_ns: times.iter().copied().max().unwrap_or(0),
                mean_run_controller_ns: mean * steps as f64,
                total_wall_s,
                max_voltage: sum.max_voltage,
                max_vs: sum.max_vs,
                max_vs_vb_violation: sum.max_vs_vb_violation,
                fallback_count: sum.fallback_count,
                regions: (kind == ControllerKind::Empc)
                    .then(|| solutions.as_ref().map(|v| v.iter().map(|s| s.regions.len()).collect()))
                    .flatten(),
            });
            log::info!("{} / {}: {:.0} ns per step", s.name, kind.label(), mean);
        }
    }
    let find = |name: &str, kind| rows.iter().find(|r: &&BenchRow| r.scenario == name && r.controller == kind);
    let ratios: Vec<SpeedRatio> = set
        .scenarios
        .iter()
        .filter_map(|s| {
            let (e, n) = (find(&s.name, ControllerKind::Empc)?, find(&s.name, ControllerKind::Nmpc)?);
            Some(SpeedRatio {
                scenario: s.name.clone(),
                empc_mean_step_ns: e.mean_step_ns,
                nmpc_mean_step_ns: n.mean_step_ns,
                speedup: n.mean_step_ns / e.mean_step_ns,
            })
        })
        .collect();
    let empc: Vec<f64> = rows
        .iter()
        .filter(|r| r.controller == ControllerKind::Empc)
        .map(|r| r.mean_step_ns)
        .collect();
    let empc_spread = (!empc.is_empty()).then(|| {
        empc.iter().copied().fold(f64::NEG_INFINITY, f64::max) / empc.iter().copied().fold(f64::INFINITY, f64::min)
    });
    Ok(BenchReport {
        name: set.name.clone(),
        repeats: set.repeats,
        rows,
        ratios,
        empc_spread,
    })
}

pub fn run_bench(config: &Path, out_dir: &Path, ov: &Overrides) -> Result<BenchReport, AppError> {
    let mut set = match scenario::load(config)? {
        ConfigFile::Bench(b) => b,
        ConfigFile::Scenario(s) => BenchSet {
            name: s.name.clone(),
            repeats: 20,
            controllers: vec![ControllerKind::Empc, ControllerKind::Nmpc],
            scenarios: vec![s],
        },
        ConfigFile::Sweep(sw) => BenchSet {
            name: sw.name,
            repeats: 20,
            controllers: vec![ControllerKind::Empc, ControllerKind::Nmpc],
            scenarios: sw.scenarios,
        },
    };
    if let Some(r) = ov.repeats {
        set.repeats = r.max(1);
    }
    if let Some(c) = ov.controller {
        set.controllers = vec![c];
    }
    for s in &mut set.scenarios {
        ov.apply(s);
    }
    let report = bench(&set)?;
    write_json(&out_dir.join(format!("{}_bench.json", report.name)), &report)?;
    Ok(report)
}

/// Converts a table file (or directory of segment files) to one file,
/// optionally rounding its entries.
pub fn export(input: &Path, output: &Path, format: TableFormat, round: Option<i32>) -> Result<TableFile, AppError> {
    let table = load_tables(input)?;
    let table = match round {
        Some(d) => table.rounded(d),
        None => table,
    };
    export_table(&table, output, format)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySegment {
    pub index: usize,
    /// Feasible parameters drawn.
    pub samples: usize,
    /// Feasible parameters with no region.
    pub uncovered: usize,
    pub max_error: f64,
    pub worst_theta: Option<[f64; 5]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub tolerance: f64,
    pub max_uncovered_fraction: f64,
    pub passed: bool,
    pub segments: Vec<VerifySegment>,
}

/// Compares a table's law with the online QP at `samples` feasible random
/// parameters per segment.
pub fn verify_solutions(
    problems: &[MpqpProblem],
    solutions: &[ExplicitSolution],
    samples: usize,
    seed: u64,
    tolerance: f64,
    max_uncovered_fraction: f64,
) -> VerifyReport {
    let settings = QpSettings::default();
    let pairs: Vec<_> = problems.iter().zip(solutions).enumerate().collect();
    let segments = crate::par::map(&pairs, |&(i, (p, sol))| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut out = VerifySegment {
            index: p.segment_index,
            samples: 0,
            uncovered: 0,
            max_error: 0.0,
            worst_theta: None,
        };
        let mut draws = 0;
        while out.samples < samples && draws < 100 * samples {
            draws += 1;
            let theta = sol.theta_box.sample(&mut rng);
            let z = match solve_qp(&p.qp_at(&theta), &settings) {
                Ok(q) => q.z,
                Err(QpError::Infeasible) => continue,
                Err(e) => {
                    log::warn!("segment {}: {e} at {:?}", p.segment_index, theta.as_slice());
                    continue;
                }
            };
            out.samples += 1;
            match sol.evaluate(&theta) {
                Some(law) => {
                    let err = (law - z).amax();
                    if err > out.max_error {
                        out.max_error = err;
                        out.worst_theta = Some(theta.into());
                    }
                }
                None => out.uncovered += 1,
            }
        }
        out
    });
    let passed = segments.iter().all(|s| {
        s.samples > 0
            && s.max_error <= tolerance
            && (s.uncovered as f64) <= max_uncovered_fraction * s.samples as f64
    });
    VerifyReport {
        tolerance,
        max_uncovered_fraction,
        passed,
        segments,
    }
}

pub fn verify(table: &Path, config: &Path, out_dir: &Path, samples: usize, ov: &Overrides) -> Result<VerifyReport, AppError> {
    let mut s = scenario::load_scenario(config)?;
    ov.apply(&mut s);
    let plant = plant_for(&s)?;
    let file = load_tables(table)?;
    check_tables(&file, &plant, table)?;
    let report = verify_solutions(
        &plant.problems,
        &file.solutions,
        samples,
        s.seed,
        1e-6,
        1.0 - s.synthesis.coverage_target,
    );
    write_json(&out_dir.join("verify_report.json"), &report)?;
    if !report.passed {
        let worst = report
            .segments
            .iter()
            .map(|s| format!("segment {}: max error {:.3e}, {} uncovered", s.index, s.max_error, s.uncovered))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(AppError::Verification(worst));
    }
    Ok(report)
}
