use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dagcnn::tensor::{self, ConvGeometry};
use dagcnn_bench::random;
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    let geo = ConvGeometry { stride: 1, pad: 1 };
    for (size, cin, cout) in [(32, 1, 8), (32, 8, 8), (16, 8, 16), (8, 16, 16)] {
        let x = random(&[size, size, cin], 1);
        let k = random(&[3, 3, cin, cout], 2);
        let b = random(&[cout], 3);
        let id = format!("{size}x{size}x{cin}->{cout}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |bench, _| {
            bench.iter(|| tensor::conv2d(black_box(&x), &k, &b, geo).unwrap())
        });
        let g = random(&[size, size, cout], 4);
        group.bench_with_input(BenchmarkId::new("backward", &id), &(), |bench, _| {
            bench.iter(|| tensor::conv2d_backward(black_box(&x), &k, &g, geo).unwrap())
        });
    }
    group.finish();
}

fn pointwise(c: &mut Criterion) {
    let x = random(&[32, 32, 8], 5);
    let g = random(&[32, 32, 8], 6);
    c.bench_function("relu/forward", |b| b.iter(|| tensor::relu(black_box(&x))));
    c.bench_function("relu/backward", |b| b.iter(|| tensor::relu_backward(black_box(&x), &g).unwrap()));
    c.bench_function("maxpool2d/forward", |b| b.iter(|| tensor::maxpool2d(black_box(&x), 2, 2).unwrap()));
    c.bench_function("global_avg_pool/forward", |b| b.iter(|| tensor::global_avg_pool(black_box(&x)).unwrap()));
    c.bench_function("l2_normalize/backward", |b| b.iter(|| tensor::l2_normalize_backward(black_box(&x), &g, 1e-12).unwrap()));
}

criterion_group!(benches, conv, pointwise);
criterion_main!(benches);
