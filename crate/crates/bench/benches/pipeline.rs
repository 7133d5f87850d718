use credence_core::estimator::{fit_addition_refutation, fit_evaluation, FitConfig};
use credence_core::intensity::{addition_compensator, evaluation_compensator};
use credence_core::simulator::{generate_synthetic_corpus, SyntheticConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn simulation(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    for n_items in [100, 400] {
        let cfg = SyntheticConfig::desk_scale(50, n_items, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n_items), &cfg, |b, cfg| {
            b.iter(|| generate_synthetic_corpus(black_box(cfg)).unwrap())
        });
    }
    group.finish();
}

fn fitting(c: &mut Criterion) {
    let cfg = SyntheticConfig::desk_scale(50, 200, 2);
    let (ds, truth) = generate_synthetic_corpus(&cfg).unwrap();
    let topics = truth.topics().unwrap();
    let fit = FitConfig {
        kernels: cfg.kernels.clone(),
        eta_grid: vec![0.01],
        ..FitConfig::default()
    };
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    group.bench_function("addition", |b| {
        b.iter(|| fit_addition_refutation(&ds, &topics, &fit).unwrap())
    });
    group.bench_function("evaluation", |b| {
        b.iter(|| fit_evaluation(&ds, &topics, &fit).unwrap())
    });
    group.finish();
}

fn compensators(c: &mut Criterion) {
    let cfg = SyntheticConfig::desk_scale(50, 50, 3);
    let (ds, truth) = generate_synthetic_corpus(&cfg).unwrap();
    let p = &truth.model;
    c.bench_function("compensator/addition", |b| {
        b.iter(|| {
            ds.items()
                .iter()
                .map(|d| addition_compensator(d, p.item(&d.id).unwrap(), p, 0.0, d.horizon))
                .sum::<f64>()
        })
    });
    c.bench_function("compensator/evaluation", |b| {
        b.iter(|| {
            let mut total = 0.0;
            for d in ds.items() {
                let item = p.item(&d.id).unwrap();
                for e in &d.events {
                    total +=
                        evaluation_compensator(item, p, e.source, e.t_add, d.horizon - e.t_add);
                }
            }
            total
        })
    });
}

criterion_group!(benches, simulation, fitting, compensators);
criterion_main!(benches);
