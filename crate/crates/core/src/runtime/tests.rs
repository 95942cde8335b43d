use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::explicit::{ExploreSettings, ThetaBox};
use crate::pipeline::Plant;
use crate::segments::{default_breakpoints, Breakpoint};

struct Fixture {
    plant: Plant,
    solutions: Vec<ExplicitSolution>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let plant = Plant::new(NdcParams::default(), &default_breakpoints(), MpcConfig::default(), 60.0).unwrap();
        let settings = ExploreSettings {
            coverage_samples: 20_000,
            ..ExploreSettings::default()
        };
        let solutions = plant
            .synthesize(&ThetaBox::default(), &settings)
            .unwrap()
            .into_iter()
            .map(|o| o.solution)
            .collect();
        Fixture { plant, solutions }
    })
}

fn empc() -> ExplicitController {
    let fx = fixture();
    ExplicitController::new(
        fx.plant.table.clone(),
        fx.solutions.clone(),
        &fx.plant.mpc,
        Scheduler::new(Schedule::Predicted, &fx.plant.model),
    )
}

fn online() -> OnlineQpController {
    let p = &fixture().plant;
    OnlineQpController::new(p.table.clone(), &p.model, &p.mpc, Scheduler::new(Schedule::Predicted, &p.model))
}

fn nmpc(max_iters: usize) -> NmpcController {
    let p = &fixture().plant;
    NmpcController::new(p.params.clone(), p.model.clone(), p.mpc.clone(), p.table.clone(), max_iters)
}

fn closed_loop() -> ClosedLoop {
    let p = &fixture().plant;
    ClosedLoop::new(p.params.clone(), p.model.clone(), p.mpc.clone())
}

#[test]
fn no_move_at_reference() {
    let params = NdcParams::default();
    for soc in [0.25, 0.5, 0.7, 0.85] {
        let x = params.equilibrium(soc);
        let mut ctrl = ControllerState::default();
        let (i_next, diag) = empc().step(&mut ctrl, &x, soc);
        assert!(!diag.fallback);
        assert!(i_next.abs() <= 1e-3, "soc {soc}: {i_next}");
    }
}

#[test]
fn explicit_and_online_moves_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut e, mut q) = (empc(), online());
    let mut compared = 0;
    for _ in 0..3000 {
        let x = NdcState::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..3.0));
        let r = rng.random_range(0.2..1.0);
        let u = rng.random_range(-3.0..3.0);
        let (mut de, mut dq) = (StepDiagnostics::default(), StepDiagnostics::default());
        let (Some(a), Some(b)) = (e.first_move(&x, r, u, &mut de), q.first_move(&x, r, u, &mut dq)) else {
            continue;
        };
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        assert_eq!(de.segment, dq.segment);
        compared += 1;
    }
    assert!(compared > 1000);
}

#[test]
fn zero_tracking_weight_means_no_move() {
    let p = &fixture().plant;
    let cfg = MpcConfig {
        q_weight: 0.0,
        ..MpcConfig::default()
    };
    let mut q = OnlineQpController::new(p.table.clone(), &p.model, &cfg, Scheduler::new(Schedule::Predicted, &p.model));
    let mut diag = StepDiagnostics::default();
    // Mid-range current, no bound near activity.
    let x = NdcState::new(0.4, 0.41, 1.0);
    let du = q.first_move(&x, 0.9, 0.0, &mut diag).unwrap();
    assert!(du.abs() < 1e-12);
}

#[test]
fn basic_charge_with_state_feedback() {
    let cl = closed_loop();
    let trace = run_closed_loop(&cl, &mut empc());
    let s = trace.summary();
    assert!(s.completed);
    assert!(s.charging_steps.unwrap() <= 150);
    assert!(s.final_soc >= 0.895);
    assert!(s.max_current <= 3.0 + 1e-6 && s.min_current >= -1e-6);
    assert!(s.max_vs <= 0.95 + 1e-6);
    assert!(s.max_vs_vb_violation <= 1e-6);
    assert!(s.max_voltage <= 4.2);
    assert_eq!(s.fallback_count, 0);
    let soc = trace.soc();
    assert!(soc.windows(2).all(|w| w[1] >= w[0] - 1e-12));
}

#[test]
fn explicit_and_online_trajectories_match() {
    let cl = closed_loop();
    let a = run_closed_loop(&cl, &mut empc());
    let b = run_closed_loop(&cl, &mut online());
    assert_eq!(a.rows.len(), b.rows.len());
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        for (u, v) in [(ra.vb, rb.vb), (ra.vs, rb.vs), (ra.current, rb.current)] {
            assert!((u - v).abs() <= 1e-6);
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let mut cl = closed_loop();
    cl.feedback = Feedback::Ekf;
    cl.noise.enabled = true;
    cl.noise.seed = 42;
    let a = run_closed_loop(&cl, &mut empc()).without_timing();
    let b = run_closed_loop(&cl, &mut empc()).without_timing();
    assert_eq!(a.to_csv(), b.to_csv());
    cl.noise.seed = 43;
    let c = run_closed_loop(&cl, &mut empc()).without_timing();
    assert_ne!(a.to_csv(), c.to_csv());
}

#[test]
fn csv_has_expected_columns() {
    let trace = run_closed_loop(&closed_loop(), &mut empc());
    let csv = trace.to_csv();
    assert_eq!(
        csv.lines().next().unwrap(),
        "step,time_s,Vb,Vs,I,V,SoC,eta,segment,region,du,solver_time_ns,fallback_flag"
    );
    assert_eq!(csv.lines().count(), trace.rows.len() + 1);
}

#[test]
fn nmpc_matches_online_qp_on_affine_ocv() {
    // Affine OCV and a practically constant resistance: every
    // linearization is exact.
    let params = NdcParams {
        alpha: [3.3, 0.9, 0.0, 0.0, 0.0, 0.0],
        beta: [0.09, 1e-12, 10.0],
        ..NdcParams::default()
    };
    let cfg = MpcConfig::default();
    let plant = Plant::new(params.clone(), &[Breakpoint::new(0.0, 1.0, 0.5)], cfg.clone(), 60.0).unwrap();
    let mut q = OnlineQpController::new(
        plant.table.clone(),
        &plant.model,
        &cfg,
        Scheduler::new(Schedule::Predicted, &plant.model),
    );
    let mut n = NmpcController::new(params, plant.model.clone(), cfg, plant.table.clone(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let x = NdcState::new(rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.0..3.0));
        let (mut d1, mut d2) = (StepDiagnostics::default(), StepDiagnostics::default());
        let a = q.first_move(&x, 0.9, 0.0, &mut d1);
        let b = n.first_move(&x, 0.9, 0.0, &mut d2);
        match (a, b) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
            (None, None) => {}
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn nmpc_converges_and_tracks_explicit_law() {
    let cl = closed_loop();
    let mut n = nmpc(10);
    let mut ctrl = ControllerState::default();
    let mut x = cl.params.equilibrium(cl.soc_start);
    for _ in 0..150 {
        if cl.params.soc(x.vb, x.vs) >= 0.895 {
            break;
        }
        let (i_next, diag) = n.step(&mut ctrl, &x, 0.9);
        assert!(diag.converged && diag.iterations <= 10);
        assert!(n.last_changes.last().copied().unwrap_or(0.0) < 1e-6);
        x = cl.model.propagate(&x, i_next - x.current);
    }
    let a = run_closed_loop(&cl, &mut empc());
    let b = run_closed_loop(&cl, &mut nmpc(10));
    assert!(b.completed);
    let (sa, sb) = (a.soc(), b.soc());
    for k in 0..sa.len().max(sb.len()) {
        let u = sa[k.min(sa.len() - 1)];
        let v = sb[k.min(sb.len() - 1)];
        assert!((u - v).abs() <= 0.01, "step {k}: {u} vs {v}");
    }
}

#[test]
fn ekf_tracks_exactly_without_noise() {
    let mut cl = closed_loop();
    cl.feedback = Feedback::Ekf;
    cl.step_budget = 150;
    cl.soc_target = 1.5;
    let trace = run_closed_loop(&cl, &mut empc());
    assert_eq!(trace.rows.len(), 151);
    for (row, est) in trace.rows.iter().zip(&trace.estimates) {
        assert!((row.vb - est.vb).abs() < 1e-9);
        assert!((row.vs - est.vs).abs() < 1e-9);
        assert!((row.current - est.current).abs() < 1e-9);
    }
}

#[test]
fn ekf_recovers_from_bulk_voltage_offset() {
    let mut cl = closed_loop();
    cl.feedback = Feedback::Ekf;
    cl.ekf_initial_error = [0.05, 0.0, 0.0];
    cl.ekf_p0 = 0.05 * 0.05;
    let trace = run_closed_loop(&cl, &mut online());
    let err_at = |k: usize| (trace.rows[k].vb - trace.estimates[k].vb).abs();
    assert!(err_at(0) > 0.04);
    assert!((30..trace.rows.len()).all(|k| err_at(k) < 0.005), "{}", err_at(30));
}

#[test]
fn ekf_covariance_stays_psd_and_innovations_are_consistent() {
    let fx = fixture();
    let p = &fx.plant;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let noise = rand_distr::Normal::new(0.0, 1e-3).unwrap();
    let meas = rand_distr::Normal::new(0.0, 3e-3).unwrap();
    let x0 = p.params.equilibrium(0.5);
    let q = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(1e-6, 1e-6, 1e-12));
    let mut ekf = EkfState::new(&x0, q, q, 9e-6);
    let mut x = x0;
    let mut ratio = vec![];
    for k in 0..4000 {
        // Zero-mean current oscillation keeps the state in a mid range.
        let target = 1.5 * (k as f64 * 0.05).sin();
        let du = target - x.current;
        x = p.model.propagate(&x, du);
        x.vb += rand_distr::Distribution::sample(&noise, &mut rng);
        x.vs += rand_distr::Distribution::sample(&noise, &mut rng);
        let v = p.params.terminal_voltage(&x) + rand_distr::Distribution::sample(&meas, &mut rng);
        let inn = ekf.step(&p.params, &p.model, du, v);
        let eig = ekf.p.symmetric_eigenvalues();
        assert!(eig.min() >= -1e-12);
        assert_eq!(ekf.p, ekf.p.transpose());
        if k >= 100 {
            ratio.push(inn.value * inn.value / inn.variance);
        }
    }
    let mean = ratio.iter().sum::<f64>() / ratio.len() as f64;
    assert!((mean - 1.0).abs() < 0.3, "normalized innovation variance {mean}");
}
