use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use deltamerge_bench::fixture;
use deltamerge_core::{dare, merge, trim_topk, Granularity, MergeInput, MergeMethod, MergeRecipe};

fn merges(c: &mut Criterion) {
    let (base, deltas) = fixture(4, 2, 1);
    let refs: Vec<_> = deltas.iter().collect();
    let mut group = c.benchmark_group("merge");
    for method in MergeMethod::ALL {
        let inputs = vec![MergeInput::new("a", 1.0), MergeInput::new("b", 1.0)];
        let recipe = MergeRecipe::new(method, inputs);
        group.bench_with_input(BenchmarkId::from_parameter(method), &recipe, |b, r| {
            b.iter(|| merge(black_box(r), &base, &refs).unwrap())
        });
    }
    group.finish();
}

fn sparsifiers(c: &mut Criterion) {
    let (_, deltas) = fixture(4, 1, 2);
    let delta = &deltas[0];
    let mut group = c.benchmark_group("sparsify");
    for k in [0.1, 0.5] {
        group.bench_with_input(BenchmarkId::new("trim_topk", k), &k, |b, &k| {
            b.iter(|| trim_topk(black_box(delta), k, Granularity::PerTensor).unwrap())
        });
    }
    group.bench_function("trim_topk_global", |b| {
        b.iter(|| trim_topk(black_box(delta), 0.5, Granularity::Global).unwrap())
    });
    group.bench_function("dare", |b| b.iter(|| dare(black_box(delta), 0.5, 3).unwrap()));
    group.finish();
}

criterion_group!(benches, merges, sparsifiers);
criterion_main!(benches);
