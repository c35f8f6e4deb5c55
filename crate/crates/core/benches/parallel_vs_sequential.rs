use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cesis::harness::{parse_config, run_repetitions};
use cesis::model::ModelRegistry;
use cesis::parallel::Execution;
use cesis::rng::stream;
use cesis::weighted_em::{em_fit, EmSettings, WeightedSample};
use rand::Rng;

const CANONICAL: &str = include_str!("../../../configs/numerical_example.conf");

fn repetitions(c: &mut Criterion) {
    let registry = ModelRegistry::default();
    let mut spec = parse_config(CANONICAL, &registry).unwrap();
    spec.repetitions = 8;
    let mut group = c.benchmark_group("ce_sis_repetitions");
    group.sample_size(10);
    for mode in [Execution::Sequential, Execution::Parallel] {
        spec.run.execution = mode;
        spec.run.em.execution = mode;
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &spec, |b, spec| {
            b.iter(|| run_repetitions(spec, &registry).unwrap())
        });
    }
    group.finish();
}

fn em_restarts(c: &mut Criterion) {
    let mut rng = stream(1, &[]);
    let samples: Vec<WeightedSample> = (0..400)
        .map(|i| {
            let centre = if i % 2 == 0 { -2.0 } else { 2.5 };
            WeightedSample {
                x: vec![centre + rng.random::<f64>() - 0.5],
                v: rng.random::<f64>(),
            }
        })
        .collect();
    let mut group = c.benchmark_group("em_fit_k3");
    for mode in [Execution::Sequential, Execution::Parallel] {
        let settings = EmSettings {
            execution: mode,
            ..EmSettings::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &settings, |b, s| {
            b.iter(|| em_fit(3, &samples, s, 9).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, repetitions, em_restarts);
criterion_main!(benches);
