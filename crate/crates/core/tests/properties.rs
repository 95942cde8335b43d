use std::sync::OnceLock;

use proptest::prelude::*;

use ndc_empc::explicit::{ExplicitSolution, ExploreSettings, ThetaBox};
use ndc_empc::model::{NdcParams, NdcState};
use ndc_empc::mpqp::{assemble_theta, build, MpcConfig, Theta};
use ndc_empc::pipeline::Plant;
use ndc_empc::qp::{solve_qp, QpError, QpSettings};
use ndc_empc::segments::default_breakpoints;

fn setup() -> &'static (Plant, Vec<ExplicitSolution>) {
    static S: OnceLock<(Plant, Vec<ExplicitSolution>)> = OnceLock::new();
    S.get_or_init(|| {
        let plant = Plant::new(NdcParams::default(), &default_breakpoints(), MpcConfig::default(), 60.0).unwrap();
        let settings = ExploreSettings {
            coverage_samples: 20_000,
            ..ExploreSettings::default()
        };
        let sols = plant
            .synthesize(&ThetaBox::default(), &settings)
            .unwrap()
            .into_iter()
            .map(|o| o.solution)
            .collect();
        (plant, sols)
    })
}

fn theta() -> impl Strategy<Value = Theta> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..3.0f64, 0.2..1.0f64, -3.0..3.0f64)
        .prop_map(|(vb, vs, i, r, u)| assemble_theta(&NdcState::new(vb, vs, i), r, u))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn lookup_law_equals_online_solution(seg in 0usize..9, th in theta()) {
        let (plant, sols) = setup();
        let qp = plant.problems[seg].qp_at(&th);
        match solve_qp(&qp, &QpSettings::default()) {
            Ok(q) => {
                let law = sols[seg].evaluate(&th);
                prop_assert!(law.is_some());
                prop_assert!((law.unwrap() - q.z).amax() <= 1e-6);
            }
            Err(QpError::Infeasible) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn at_most_one_region_holds_a_point_strictly(seg in 0usize..9, th in theta()) {
        let sol = &setup().1[seg];
        let strict = sol.regions.iter().filter(|r| r.contains(&th, -1e-7)).count();
        prop_assert!(strict <= 1);
    }

    #[test]
    fn builder_is_bit_identical(seg in 0usize..9, n in 2usize..15, nu in 1usize..3) {
        let (plant, _) = setup();
        let cfg = MpcConfig { horizon: n, input_horizon: nu, ..MpcConfig::default() };
        let s = &plant.table.segments[seg];
        let a = build(&plant.model, s, &cfg, s.index).unwrap();
        let b = build(&plant.model, s, &cfg, s.index).unwrap();
        prop_assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        prop_assert!(a.sigma.clone().cholesky().is_some());
    }

    #[test]
    fn cost_is_never_below_the_optimum(seg in 0usize..9, th in theta(), z0 in -3.0..3.0f64, z1 in -3.0..3.0f64) {
        let (plant, _) = setup();
        let p = &plant.problems[seg];
        let qp = p.qp_at(&th);
        if let Ok(q) = solve_qp(&qp, &QpSettings::default()) {
            let z = nalgebra::DVector::from_vec(vec![z0, z1]);
            if qp.max_violation(&z) <= 0.0 {
                prop_assert!(p.cost(&th, &z) >= p.cost(&th, &q.z) - 1e-9);
            }
        }
    }
}
