use std::hint::black_box;

use advlab_core::circles::{heatmap, make_circles, CirclesParams, HIDDEN_UNITS, INNER, OUTER};
use advlab_core::net::TrainConfig;
use advlab_core::{run_attack, AttackConfig, Mlp, PerturbationSource, Sample, Schedule, SourceKind};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn model() -> Mlp {
    let data = make_circles(&CirclesParams { n: 200, ..CirclesParams::default() }).unwrap();
    let train = TrainConfig { epochs: 50, ..TrainConfig::default() };
    advlab_core::circles::train_circles_model(&data, HIDDEN_UNITS, 0, &train).unwrap().0
}

fn gradients(c: &mut Criterion) {
    let m = model();
    let x = [0.3, -0.7];
    let mut g = c.benchmark_group("gradients");
    g.bench_function("forward", |b| b.iter(|| m.logits(black_box(&x)).unwrap()));
    g.bench_function("grad_input_ce", |b| b.iter(|| m.grad_input_ce(black_box(&x), INNER).unwrap()));
    g.bench_function("logit_jacobian", |b| b.iter(|| m.logit_jacobian(black_box(&x)).unwrap()));
    g.finish();
}

fn attacks(c: &mut Criterion) {
    let m = model();
    let x0 = Sample::new(vec![0.95, 0.1], -1.0, 1.0, OUTER).unwrap();
    let mut g = c.benchmark_group("run_attack");
    for kind in SourceKind::ALL {
        let cfg = AttackConfig::new(PerturbationSource::new(kind), INNER, Schedule::EqualPerturbation(0.01));
        g.bench_with_input(BenchmarkId::from_parameter(kind.name()), &cfg, |b, cfg| {
            b.iter(|| run_attack(&m, black_box(&x0), cfg).unwrap())
        });
    }
    g.finish();
}

fn heatmaps(c: &mut Criterion) {
    let m = model();
    let mut g = c.benchmark_group("heatmap");
    g.sample_size(10);
    for res in [50, 100] {
        g.bench_with_input(BenchmarkId::new("ce", res), &res, |b, &res| {
            b.iter(|| heatmap(&m, SourceKind::Ce, INNER, res).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, gradients, attacks, heatmaps);
criterion_main!(benches);
