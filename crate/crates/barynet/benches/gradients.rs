//! Benchmarks for the local gradient oracles: sampled softmax plans and
//! quantization, the heaviest data-parallel-free hot paths.
//!
//! Run with the default (parallel) feature and again with
//! `--no-default-features` to compare the rayon and sequential cores:
//!
//! ```sh
//! cargo bench --bench gradients
//! cargo bench --bench gradients --no-default-features
//! ```

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use barynet::dual_oracle::{quantize_gradient, sampled_gradient, DualPotential};
use barynet::problem::{CostKind, CostOracle, Domain, Measure, SupportGrid};
use barynet::rng::{substream, Purpose};

fn fixture(n: usize) -> (SupportGrid, CostOracle, Measure, DualPotential) {
    let grid = SupportGrid::regular_1d(n, 0.0, 1.0).unwrap();
    let domain = Domain::unit(1);
    let cost = CostOracle::new(CostKind::SqEuclidean, true, &grid, &domain);
    let measure = Measure::Gaussian { mean: [0.5, 0.0], std: 0.15 };
    let lam = DualPotential::new((0..n).map(|l| (l as f64).sin() * 0.1).collect()).unwrap();
    (grid, cost, measure, lam)
}

fn bench_sampled_gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("sampled_gradient");
    for &(n, m1) in &[(100usize, 10usize), (100, 100), (400, 10)] {
        let (grid, cost, measure, lam) = fixture(n);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("n{n}_m1_{m1}")),
            &m1,
            |b, &m1| {
                let mut stream = substream(1, 0, Purpose::Measure);
                b.iter(|| {
                    black_box(sampled_gradient(
                        &lam, &measure, &grid, &cost, m1, 0.1, &mut stream,
                    ))
                });
            },
        );
    }
    group.finish();
}

fn bench_quantize(c: &mut Criterion) {
    let mut group = c.benchmark_group("quantize_gradient");
    for &(n, m2) in &[(100usize, 10usize), (100, 1000), (400, 100)] {
        let (grid, cost, measure, lam) = fixture(n);
        let mut stream = substream(2, 0, Purpose::Measure);
        let p_bar = sampled_gradient(&lam, &measure, &grid, &cost, 50, 0.1, &mut stream);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("n{n}_m2_{m2}")),
            &m2,
            |b, &m2| {
                let mut qstream = substream(3, 0, Purpose::Quantize);
                b.iter(|| black_box(quantize_gradient(&p_bar, m2, &mut qstream)));
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_sampled_gradient, bench_quantize);
criterion_main!(benches);
