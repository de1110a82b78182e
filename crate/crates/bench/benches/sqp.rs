use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use zogp::sqp::{naive_iteration, zero_order_iteration, Iterate, SolverMode, SolverOptions};
use zogp_bench::chain_ocp;

fn zero_order(c: &mut Criterion) {
    let mut g = c.benchmark_group("zero_order_iteration");
    let opts = SolverOptions {
        workers: 1,
        ..SolverOptions::default()
    };
    for n_mass in [3, 4, 5, 6, 7] {
        let spec = chain_ocp(n_mass, None).unwrap();
        let it = Iterate::initial(&spec).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(spec.n_x()), &it, |b, it| {
            b.iter(|| zero_order_iteration(&spec, black_box(it), &opts).unwrap())
        });
    }
    g.finish();
}

fn naive(c: &mut Criterion) {
    let mut g = c.benchmark_group("naive_iteration");
    g.sample_size(10);
    let opts = SolverOptions {
        workers: 1,
        ..SolverOptions::with_mode(SolverMode::Naive)
    };
    for n_mass in [3, 4] {
        let spec = chain_ocp(n_mass, None).unwrap();
        let it = Iterate::initial(&spec).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(spec.n_x()), &it, |b, it| {
            b.iter(|| naive_iteration(&spec, black_box(it), &opts).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, zero_order, naive);
criterion_main!(benches);
