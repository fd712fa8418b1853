use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mcint_bench::{kernel, quad_core};
use mcint_core::kernels::{build_pointer_chase, Arena, KernelRunner};
use mcint_core::AccessPattern;
use std::hint::black_box;

fn iterations(c: &mut Criterion) {
    let t = quad_core();
    let mut group = c.benchmark_group("kernel_iteration");
    for (pattern, working_set) in [
        (AccessPattern::SeqRead, 16 << 10),
        (AccessPattern::SeqRead, 8 << 20),
        (AccessPattern::SeqWrite, 8 << 20),
        (AccessPattern::PointerChase, 16 << 10),
        (AccessPattern::PointerChase, 8 << 20),
    ] {
        let spec = kernel(pattern, working_set);
        let arena = Arena::build(&spec, t.line_size).unwrap();
        let mut runner = KernelRunner::new(&spec, &arena).unwrap();
        group.throughput(Throughput::Elements(spec.inner_ops));
        group.bench_function(BenchmarkId::new(format!("{pattern:?}"), working_set), |b| {
            b.iter(|| runner.iterate())
        });
        black_box(runner.checksum());
    }
    group.finish();
}

fn permutation(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_pointer_chase");
    for n in [1_024usize, 131_072] {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| build_pointer_chase(black_box(n), 7).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, iterations, permutation);
criterion_main!(benches);
