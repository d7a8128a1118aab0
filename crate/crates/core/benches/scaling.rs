//! Sequential vs rayon execution of the scaling solvers.
//!
//! Without the `parallel` feature both variants run the same sequential code,
//! which makes the feature's overhead visible as well.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use sp2ot_core::ot_core::solve_balanced_ot;
use sp2ot_core::p2ot::{random_predictions, solve_p2ot_with_cost, solve_p2ot_gsa_with_cost};
use sp2ot_core::{CostMatrix, KlWeight, Parallelism, ScalingConfig};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

fn cfg(par: Parallelism) -> ScalingConfig {
    ScalingConfig::default().with_parallelism(par)
}

fn p2ot(c: &mut Criterion) {
    let mut group = c.benchmark_group("p2ot_fast");
    group.sample_size(10);
    for (n, k) in [(1024, 50), (4096, 100)] {
        let cost = CostMatrix::from_probabilities(&random_predictions(n, k, 0, 3.0)).unwrap();
        group.throughput(Throughput::Elements((n * k) as u64));
        for (name, par) in MODES {
            group.bench_with_input(BenchmarkId::new(name, format!("{n}x{k}")), &cost, |b, cost| {
                b.iter(|| solve_p2ot_with_cost(cost, 0.9, KlWeight::Finite(1.0), &cfg(par)).unwrap())
            });
        }
    }
    group.finish();
}

fn gsa(c: &mut Criterion) {
    let mut group = c.benchmark_group("p2ot_gsa");
    group.sample_size(10);
    let cost = CostMatrix::from_probabilities(&random_predictions(4096, 100, 0, 3.0)).unwrap();
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::new(name, "4096x100"), |b| {
            b.iter(|| solve_p2ot_gsa_with_cost(&cost, 0.9, KlWeight::Finite(1.0), &cfg(par)).unwrap())
        });
    }
    group.finish();
}

fn balanced(c: &mut Criterion) {
    let mut group = c.benchmark_group("balanced_ot");
    group.sample_size(10);
    let pred = random_predictions(4096, 100, 1, 3.0);
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::new(name, "4096x100"), |b| {
            b.iter(|| solve_balanced_ot(&pred, &cfg(par)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, p2ot, gsa, balanced);
criterion_main!(benches);
