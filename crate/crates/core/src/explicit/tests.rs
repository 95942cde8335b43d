use std::sync::OnceLock;

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::NdcParams;
use crate::mpqp::{build, MpcConfig, MpqpProblem};
use nalgebra::SMatrix;
use crate::qp::solve_qp;
use crate::segments::{default_breakpoints, SegmentTable};

/// min 1/2 z^2 + t z  s.t. -1 <= z <= 1, with t the first parameter.
fn toy() -> (MpqpProblem, ThetaBox) {
    let mut f = DMatrix::zeros(1, THETA_DIM);
    f[(0, 0)] = 1.0;
    let p = MpqpProblem {
        sigma: DMatrix::identity(1, 1),
        f,
        g: DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
        s: DMatrix::zeros(2, THETA_DIM),
        w: DVector::from_vec(vec![1.0, 1.0]),
        theta_cost: SMatrix::zeros(),
        tags: vec![],
        dropped_rows: vec![],
        segment_index: 0,
    };
    let bbox = ThetaBox {
        lo: [-3.0, 0.0, 0.0, 0.0, 0.0],
        hi: [3.0, 1.0, 1.0, 1.0, 1.0],
    };
    (p, bbox)
}

fn fast_settings() -> ExploreSettings {
    ExploreSettings {
        coverage_samples: 20_000,
        ..ExploreSettings::default()
    }
}

struct Fixture {
    problems: Vec<MpqpProblem>,
    solutions: Vec<ExplicitSolution>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = MpcConfig::default();
        let params = NdcParams::default();
        let model = params.discretize(60.0).unwrap();
        let table = SegmentTable::build(&params, &default_breakpoints(), cfg.gamma1).unwrap();
        let problems: Vec<_> = table
            .segments
            .iter()
            .map(|s| build(&model, s, &cfg, s.index).unwrap())
            .collect();
        let solutions = explore_all(&problems, &ThetaBox::default(), &fast_settings())
            .into_iter()
            .map(|r| r.unwrap().0)
            .collect();
        Fixture {
            problems,
            solutions,
        }
    })
}

fn feasible_samples(p: &MpqpProblem, bbox: &ThetaBox, n: usize, seed: u64) -> Vec<Theta> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![];
    while out.len() < n {
        let theta = bbox.sample(&mut rng);
        let qp = p.qp_at(&theta);
        if lp_feasible(&qp.g, &qp.w, 1e-9).is_feasible() {
            out.push(theta);
        }
    }
    out
}

#[test]
fn toy_problem_has_three_regions() {
    let (p, bbox) = toy();
    let (sol, report) = explore(&p, &bbox, &fast_settings()).unwrap();
    assert_eq!(sol.regions.len(), 3);
    assert_eq!(report.coverage, 1.0);
    let mut sets: Vec<_> = sol.regions.iter().map(|r| r.active_set.clone()).collect();
    sets.sort();
    assert_eq!(sets, vec![vec![], vec![0], vec![1]]);
    for t in [-2.5, -1.0 - 1e-3, -0.3, 0.0, 0.7, 1.0 + 1e-3, 2.9] {
        let theta = Theta::new(t, 0.5, 0.5, 0.5, 0.5);
        let z = sol.evaluate(&theta).unwrap()[0];
        assert_abs_diff_eq!(z, (-t).clamp(-1.0, 1.0), epsilon = 1e-12);
    }
    let unconstrained = sol.regions.iter().find(|r| r.active_set.is_empty()).unwrap();
    assert_abs_diff_eq!(unconstrained.k[(0, 0)], -1.0);
    assert_eq!(unconstrained.g[0], 0.0);
    // The unconstrained region is the slab -1 <= t <= 1 inside the box.
    let (c, radius) = unconstrained.chebyshev().unwrap();
    assert!(c[0].abs() < 1.0 && radius > 0.4);
    assert!(sol.locate(&Theta::new(3.5, 0.5, 0.5, 0.5, 0.5)).is_none());
}

#[test]
fn unconstrained_law_is_minus_sigma_inverse_f() {
    let fx = fixture();
    for p in &fx.problems {
        let law = active_set_law(p, &[]).unwrap();
        let expected = -p.sigma.clone().try_inverse().unwrap() * &p.f;
        assert!((law.k - expected).amax() < 1e-12);
        assert_eq!(law.g.amax(), 0.0);
    }
}

#[test]
fn law_at_start_matches_qp() {
    let fx = fixture();
    let theta = Theta::new(0.2, 0.2, 0.0, 0.9, 0.0);
    let (p, sol) = (&fx.problems[0], &fx.solutions[0]);
    let z = sol.evaluate(&theta).unwrap();
    let qp = solve_qp(&p.qp_at(&theta), &QpSettings::default()).unwrap();
    assert!((z - qp.z).amax() < 1e-8);
}

#[test]
fn region_counts_are_moderate() {
    for sol in &fixture().solutions {
        let n = sol.regions.len();
        assert!((3..=40).contains(&n), "segment {} has {n} regions", sol.segment_index);
    }
}

#[test]
fn pwa_law_matches_online_qp() {
    let fx = fixture();
    let settings = QpSettings::default();
    for (p, sol) in fx.problems.iter().zip(&fx.solutions) {
        let mut misses = 0;
        for theta in feasible_samples(p, &sol.theta_box, 1000, 11 + p.segment_index as u64) {
            let Some(z) = sol.evaluate(&theta) else {
                misses += 1;
                continue;
            };
            let qp = solve_qp(&p.qp_at(&theta), &settings).unwrap();
            let err = (z - &qp.z).amax();
            assert!(err <= 1e-6, "segment {}: error {err} at {theta:?}", p.segment_index);
        }
        assert!(misses <= 2, "segment {}: {misses} misses", p.segment_index);
    }
}

#[test]
fn interior_points_satisfy_kkt() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (p, sol) in fx.problems.iter().zip(&fx.solutions) {
        for r in &sol.regions {
            let law = active_set_law(p, &r.active_set).unwrap();
            let (center, radius) = r.chebyshev().unwrap();
            assert!(radius > MIN_RADIUS);
            let mut points = vec![center];
            while points.len() < 11 {
                let theta = sol.theta_box.sample(&mut rng);
                // Pull random points toward the center until inside.
                let mut t = 1.0;
                while t > 1e-6 {
                    let q = center + (theta - center) * t;
                    if r.contains(&q, -1e-9) {
                        points.push(q);
                        break;
                    }
                    t *= 0.5;
                }
            }
            for theta in &points {
                let qp = p.qp_at(theta);
                let z = r.law(theta);
                let lam = law.multipliers(theta);
                assert!(lam.iter().all(|&l| l >= -1e-9), "{lam:?}");
                assert!(qp.max_violation(&z) <= 1e-9);
                // Stationarity: H z + f + G_A' lambda = 0
                let g_a = qp.g.select_rows(&r.active_set);
                let stat = &qp.h * &z + &qp.f + g_a.transpose() * &lam;
                assert!(stat.amax() < 1e-8);
                for (a, &i) in r.active_set.iter().enumerate() {
                    let slack = qp.w[i] - qp.g.row(i).dot(&z.transpose());
                    assert!(slack.abs() < 1e-8 && lam[a] >= -1e-9);
                }
            }
        }
    }
}

#[test]
fn law_is_continuous_across_facets() {
    let fx = fixture();
    let mut checked = 0;
    for sol in &fx.solutions {
        for r in &sol.regions {
            for facet in 0..r.n_facets() {
                let Feasibility::Feasible { witness, radius } =
                    chebyshev_ball(&r.e_mat, &r.e_vec, Some(facet), 1e-12)
                else {
                    continue;
                };
                if radius < 1e-6 {
                    continue;
                }
                let x = Theta::from_column_slice(witness.as_slice());
                let n = Theta::from_column_slice(r.e_mat.row(facet).transpose().as_slice());
                let outside = x + n * 1e-7;
                if !sol.theta_box.contains(&outside, 0.0) {
                    continue;
                }
                let Some(j) = sol.regions.iter().position(|o| o.contains(&outside, 0.0)) else {
                    continue;
                };
                let jump = (r.law(&x) - sol.regions[j].law(&x)).amax();
                assert!(jump < 1e-6, "jump {jump} between regions at {x:?}");
                checked += 1;
            }
        }
    }
    assert!(checked > 20);
}

#[test]
fn region_interiors_are_disjoint() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for sol in &fx.solutions {
        for _ in 0..2000 {
            let theta = sol.theta_box.sample(&mut rng);
            let inside = sol.regions.iter().filter(|r| r.contains(&theta, -1e-7)).count();
            assert!(inside <= 1);
        }
    }
}

#[test]
fn exploration_is_deterministic() {
    let fx = fixture();
    let again = explore(&fx.problems[3], &ThetaBox::default(), &fast_settings()).unwrap().0;
    assert_eq!(again, fx.solutions[3]);
}

#[test]
fn infeasible_parameter_is_reported() {
    let (mut p, bbox) = toy();
    // z <= -2 and z >= 2
    p.w = DVector::from_vec(vec![-2.0, -2.0]);
    match explore(&p, &bbox, &fast_settings()) {
        Ok((sol, report)) => {
            assert!(sol.regions.is_empty());
            assert_eq!(report.coverage_feasible, 0);
        }
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn table_round_trips_bit_exactly() {
    let fx = fixture();
    let table = TableFile::new(fx.solutions.clone());
    let dir = tempfile::tempdir().unwrap();
    for format in [TableFormat::Json, TableFormat::Binary] {
        let path = dir.path().join(format!("t-{format:?}"));
        export_table(&table, &path, format).unwrap();
        let back = import_table(&path).unwrap();
        assert_eq!(back, table);
        for (a, b) in back.solutions.iter().zip(&table.solutions) {
            for (ra, rb) in a.regions.iter().zip(&b.regions) {
                for (x, y) in ra.e_mat.iter().chain(ra.k.iter()).zip(rb.e_mat.iter().chain(rb.k.iter())) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
    let rounded = table.rounded(3);
    let path = dir.path().join("rounded.bin");
    export_table(&rounded, &path, TableFormat::Binary).unwrap();
    assert_eq!(import_table(&path).unwrap(), rounded);
    assert_eq!(rounded.rounding, Some(3));
}

#[test]
fn empty_table_exports() {
    let dir = tempfile::tempdir().unwrap();
    let table = TableFile::new(vec![ExplicitSolution::empty(1, 2, ThetaBox::default())]);
    for format in [TableFormat::Json, TableFormat::Binary] {
        let path = dir.path().join("empty");
        export_table(&table, &path, format).unwrap();
        let back = import_table(&path).unwrap();
        assert_eq!(back.solutions[0].regions.len(), 0);
        assert_eq!(back, table);
    }
    let none = TableFile::new(vec![]);
    assert_eq!(TableFile::from_bytes(&none.to_bytes()).unwrap(), none);
}

#[test]
fn import_errors_carry_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let err = import_table(&missing).unwrap_err();
    assert!(err.to_string().contains("nope.json"));
    let bad = dir.path().join("bad.bin");
    let mut bytes = TableFile::new(fixture().solutions[..1].to_vec()).to_bytes();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&bad, bytes).unwrap();
    assert!(matches!(import_table(&bad), Err(EngineError::Format { .. })));
}

#[test]
fn rounding_keeps_three_decimals() {
    let sol = &fixture().solutions[1];
    let r = sol.rounded(3);
    for (a, b) in r.regions.iter().zip(&sol.regions) {
        assert!((&a.k - &b.k).amax() <= 5e-4 + 1e-12);
        for v in a.k.iter() {
            assert_abs_diff_eq!(v * 1000.0, (v * 1000.0).round(), epsilon = 1e-6);
        }
    }
}
