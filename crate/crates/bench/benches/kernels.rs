use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use varcomp::anova::sums_of_squares;
use varcomp::model::MarginalLikelihood;
use varcomp::{analyze, PriorConfig, SamplerConfig};
use varcomp_bench::{crossed, one_way};

fn anova(c: &mut Criterion) {
    let ds = crossed(8, 6, 5);
    c.bench_function("sums_of_squares 8x6x5", |b| b.iter(|| sums_of_squares(black_box(&ds)).unwrap()));
    c.bench_function("analyze 8x6x5", |b| b.iter(|| analyze(black_box(&ds)).unwrap()));
}

fn likelihood(c: &mut Criterion) {
    let ds = crossed(8, 6, 5);
    let ml = MarginalLikelihood::new(&ds);
    let v = [0.5, 0.3, 0.2, 1.0];
    c.bench_function("marginal likelihood 8x6x5", |b| {
        b.iter(|| ml.log_likelihood(black_box(&v), 0.1).unwrap())
    });
}

fn sampler(c: &mut Criterion) {
    let ds = one_way(10, 5);
    let prior = PriorConfig::default().resolve(&ds).unwrap();
    let cfg = SamplerConfig {
        chains: 1,
        iterations: 1000,
        burn_in: 500,
        ..Default::default()
    };
    let mut g = c.benchmark_group("fit");
    g.sample_size(20);
    g.bench_function("dirichlet one-way 10x5, 1000 iterations", |b| {
        b.iter(|| varcomp::sampler::fit(black_box(&ds), &prior, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, anova, likelihood, sampler);
criterion_main!(benches);
