use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use raftlab::data::{make_blobs, BlobsSpec};
use raftlab::losses::{total_loss, LossConfig, Views};
use raftlab::model::init_params;
use raftlab::train::{TrainConfig, Trainer};
use raftlab::verify::gaussian_batch;
use raftlab::{Graph, NetworkSpec, Tensor};

fn square(n: usize, offset: f64) -> Tensor {
    let data = (0..n * n).map(|i| ((i as f64) * 0.37 + offset).sin()).collect();
    Tensor::matrix(n, n, data).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let (a, b) = (square(n, 0.0), square(n, 1.0));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let spec = NetworkSpec::default();
    let params = init_params(&spec, 0).unwrap();
    let batch = gaussian_batch(64, spec.input_dim, 1);
    let cfg = LossConfig::default();
    c.bench_function("forward_only_64", |b| b.iter(|| params.forward_online(black_box(&batch.x1)).unwrap()));
    c.bench_function("raft_loss_forward_backward_64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let x1 = g.constant(batch.x1.clone());
            let x2 = g.constant(batch.x2.clone());
            let o1 = bound.online(&mut g, x1).unwrap();
            let o2 = bound.online(&mut g, x2).unwrap();
            let views = Views {
                p1: o1.p,
                p2: o2.p,
                zt1: bound.target(&mut g, x1).unwrap(),
                zt2: bound.target(&mut g, x2).unwrap(),
            };
            let parts = total_loss(&mut g, &cfg, &views).unwrap();
            g.backward(parts.total).unwrap()
        })
    });
}

fn train_step(c: &mut Criterion) {
    let data = make_blobs(&BlobsSpec::default()).unwrap();
    let cfg = TrainConfig { steps: usize::MAX, ..TrainConfig::default() };
    let mut trainer = Trainer::new(&cfg, &data).unwrap();
    c.bench_function("train_step_64", |b| b.iter(|| trainer.step().unwrap()));
}

criterion_group!(benches, matmul, forward_backward, train_step);
criterion_main!(benches);
