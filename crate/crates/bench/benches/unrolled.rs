use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qtnn_bench::{gmrf_case, rbm_case};
use qtnn_core::binary::{rbm_forward_bits, rbm_loss_grad};
use qtnn_core::grid::{gmrf_forward, gmrf_loss_grad};
use std::hint::black_box;

fn rbm(c: &mut Criterion) {
    let mut group = c.benchmark_group("rbm");
    for (v, h) in [(10, 5), (64, 32), (784, 100)] {
        let (params, x, q) = rbm_case(v, h, 1);
        group.bench_with_input(BenchmarkId::new("forward_n10", format!("{v}x{h}")), &(), |b, _| {
            b.iter(|| rbm_forward_bits(black_box(&params), black_box(&x), &q, 10).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("loss_grad_n10", format!("{v}x{h}")), &(), |b, _| {
            b.iter(|| rbm_loss_grad(black_box(&params), black_box(&x), &q, 10).unwrap())
        });
    }
    group.finish();
}

fn gmrf(c: &mut Criterion) {
    let mut group = c.benchmark_group("gmrf");
    group.sample_size(20);
    for (side, clones) in [(12, 8), (30, 8)] {
        let (params, pair) = gmrf_case(side, clones, 2);
        let id = format!("{side}x{side}_k{}", clones + 2);
        group.bench_with_input(BenchmarkId::new("forward_n15", &id), &(), |b, _| {
            b.iter(|| gmrf_forward(black_box(&params), &pair.image, pair.rows, pair.cols, 15).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("loss_grad_n15", &id), &(), |b, _| {
            b.iter(|| gmrf_loss_grad(black_box(&params), &pair, 15).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, rbm, gmrf);
criterion_main!(benches);
