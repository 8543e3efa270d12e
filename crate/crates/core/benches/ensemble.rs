//! Compares the data-parallel ensemble map against the sequential
//! fallback on a representative Monte Carlo workload.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sgl_core::control::{Atom, ControlPath};
use sgl_core::model::SdeModel;
use sgl_core::par::{indexed_map, indexed_map_seq, stable_sum};
use sgl_core::rng::derive_seed;
use sgl_core::simulate::euler_controlled;

fn workload(model: &SdeModel, control: &ControlPath, i: usize) -> f64 {
    let p = euler_controlled(model, control, &[0.0, 0.0], 0.5, 1e-3, derive_seed(7, "path", i as u64))
        .expect("simulation");
    let last = p.post(p.len() - 1);
    last.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn bench_ensemble(c: &mut Criterion) {
    let model = SdeModel::brownian(2, 1, vec![1.0, 1.0]).unwrap();
    let control = ControlPath::new(
        1.0,
        vec![],
        vec![Atom {
            time: 0.4,
            direction: vec![1.0, 0.0],
            size: 0.5,
        }],
    )
    .unwrap();
    let mut group = c.benchmark_group("ensemble_mean");
    for &n in &[256usize, 1024] {
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| {
            b.iter(|| {
                let vals = indexed_map(n, |i| workload(&model, &control, i));
                stable_sum(&vals) / n as f64
            })
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
            b.iter(|| {
                let vals = indexed_map_seq(n, |i| workload(&model, &control, i));
                stable_sum(&vals) / n as f64
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_ensemble);
criterion_main!(benches);
