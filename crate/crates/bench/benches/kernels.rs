use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fedstream_bench::{federation, velocities};
use fedstream_core::coordination::{default_n_client, greedy_assign};
use fedstream_core::numkernel::{per_sample_gradient, GradWindow, ModelSpec};
use fedstream_core::rng::StreamRng;
use fedstream_core::{SimConfig, Simulation, Strategy, StrategyKind};
use std::hint::black_box;

fn gradients(c: &mut Criterion) {
    let ds = federation(0);
    let sample = ds.clients[0].train[0].clone();
    for (name, spec) in [
        ("logreg", ModelSpec::logreg(60, 10)),
        ("mlp32", ModelSpec::mlp(60, vec![32], 10)),
    ] {
        let w = spec.init(&mut StreamRng::new(1));
        c.bench_function(&format!("per_sample_gradient/{name}"), |b| {
            b.iter(|| {
                per_sample_gradient(&spec, black_box(&w), black_box(&sample), GradWindow::Full)
                    .unwrap()
            })
        });
    }
}

fn coordination(c: &mut Criterion) {
    let ds = federation(0);
    let v = velocities(&ds);
    let n = ds.client_count();
    let n_label = vec![5; ds.class_count];
    let n_client = vec![default_n_client(&n_label, n); n];
    c.bench_function("greedy_assign/50x10", |b| {
        b.iter(|| greedy_assign(black_box(&v), &vec![10; n], &n_label, &n_client).unwrap())
    });
}

fn rounds(c: &mut Criterion) {
    let ds = federation(0);
    for kind in [
        StrategyKind::Reservoir,
        StrategyKind::OdeEst,
        StrategyKind::OdeExact,
    ] {
        let mut cfg = SimConfig::new(ModelSpec::logreg(60, 10), Strategy::new(kind));
        cfg.eval_every = 1_000_000;
        c.bench_function(&format!("run_round/{kind}"), |b| {
            b.iter_batched(
                || Simulation::new(cfg.clone(), &ds).unwrap(),
                |mut sim| sim.step().unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
}

criterion_group!(benches, gradients, coordination, rounds);
criterion_main!(benches);
