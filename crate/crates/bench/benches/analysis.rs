use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mcint_bench::durations;
use mcint_core::analysis::ranktest::mann_whitney;
use mcint_core::analysis::{build_profile, compare, DetectionPolicy};
use std::hint::black_box;

fn profile(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_profile");
    for n in [1_000usize, 10_000, 100_000] {
        let samples = durations(n, 10_000, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &samples, |b, s| {
            b.iter(|| build_profile(black_box(s)).unwrap())
        });
    }
    group.finish();
}

fn rank_test(c: &mut Criterion) {
    let mut group = c.benchmark_group("mann_whitney");
    // 20 + 20 takes the exact path; the rest the normal approximation.
    for n in [20usize, 1_000, 10_000] {
        let a = durations(n, 10_000, 2);
        let b = durations(n, 11_000, 3);
        group.bench_with_input(BenchmarkId::from_parameter(n), &(a, b), |bench, (a, b)| {
            bench.iter(|| mann_whitney(black_box(a), black_box(b)))
        });
    }
    group.finish();
}

fn comparison(c: &mut Criterion) {
    let base = build_profile(&durations(10_000, 10_000, 4)).unwrap();
    let contended = build_profile(&durations(10_000, 12_000, 5)).unwrap();
    let policy = DetectionPolicy::default();
    c.bench_function("compare/10000", |b| {
        b.iter(|| compare("bench", black_box(&base), black_box(&contended), &policy))
    });
}

criterion_group!(benches, profile, rank_test, comparison);
criterion_main!(benches);
