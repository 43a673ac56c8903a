use criterion::{criterion_group, criterion_main, Criterion};
use dagcnn::data::Split;
use dagcnn::train::{batch_gradient, TrainConfig};
use dagcnn_bench::{networks, random, small_task};
use std::hint::black_box;

fn forward_backward(c: &mut Criterion) {
    let (chain, dag) = networks(32, 16);
    let x = random(&[32, 32, 1], 7);
    for (name, g) in [("chain", &chain), ("dag", &dag)] {
        let mut ctx = g.new_context();
        c.bench_function(&format!("{name}/forward"), |b| b.iter(|| g.forward(&mut ctx, black_box(&x), 3).unwrap()));
        g.forward(&mut ctx, &x, 3).unwrap();
        c.bench_function(&format!("{name}/backward"), |b| b.iter(|| g.backward(&mut ctx).unwrap()));
        c.bench_function(&format!("{name}/backward_reference"), |b| b.iter(|| g.backward_reference(&mut ctx).unwrap()));
    }
}

fn minibatch(c: &mut Criterion) {
    let data = small_task(16);
    let (_, dag) = networks(16, data.num_classes);
    let batch: Vec<usize> = data.indices(Split::Train).into_iter().take(TrainConfig::default().batch_size).collect();
    c.bench_function("dag/minibatch_gradient_16px", |b| b.iter(|| batch_gradient(&dag, &data, black_box(&batch)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = forward_backward, minibatch
}
criterion_main!(benches);
