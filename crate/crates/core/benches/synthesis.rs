use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use ndc_empc::explicit::{coverage, explore, explore_all, ExploreSettings, ThetaBox};
use ndc_empc::model::NdcParams;
use ndc_empc::mpqp::MpcConfig;
use ndc_empc::par;
use ndc_empc::pipeline::Plant;
use ndc_empc::segments::default_breakpoints;

fn plant() -> Plant {
    Plant::new(NdcParams::default(), &default_breakpoints(), MpcConfig::default(), 60.0).unwrap()
}

fn synthesis(c: &mut Criterion) {
    let plant = plant();
    let bbox = ThetaBox::default();
    let settings = ExploreSettings {
        coverage_samples: 20_000,
        ..ExploreSettings::default()
    };
    let backend = if par::is_parallel() { "rayon" } else { "sequential build" };
    let mut g = c.benchmark_group("explore 9 segments");
    g.sample_size(10);
    g.bench_function(format!("explore_all ({backend})"), |b| {
        b.iter(|| black_box(explore_all(&plant.problems, &bbox, &settings)))
    });
    g.bench_function("one segment at a time", |b| {
        b.iter(|| {
            black_box(
                plant
                    .problems
                    .iter()
                    .map(|p| explore(p, &bbox, &settings))
                    .collect::<Vec<_>>(),
            )
        })
    });
    g.finish();

    let (solution, _) = explore(&plant.problems[4], &bbox, &settings).unwrap();
    let mut g = c.benchmark_group("coverage 100k samples");
    g.sample_size(10);
    g.bench_function(format!("chunked ({backend})"), |b| {
        b.iter(|| black_box(coverage(&plant.problems[4], &solution, 100_000, 3)))
    });
    g.finish();
}

criterion_group!(benches, synthesis);
criterion_main!(benches);
