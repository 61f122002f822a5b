use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tame_bench::{conv_expert, image_batch, losses};
use tame_core::drift::{get_threshold, update_smoothed};
use tame_core::nn::{sgd_step, Velocity};
use tame_core::{LossWindow, ReservoirBuffer, SgdConfig, SmoothedLoss};

fn network(c: &mut Criterion) {
    let mut net = conv_expert(0);
    let (x, y) = image_batch(128, 2, 1);
    c.bench_function("conv expert forward, batch 128", |b| {
        b.iter(|| net.forward(black_box(&x)).unwrap())
    });
    c.bench_function("conv expert loss and gradients, batch 128", |b| {
        b.iter(|| net.loss_and_grads(black_box(&x), &y).unwrap())
    });
    let cfg = SgdConfig::default();
    let mut velocity = Velocity::zeros_like(&net);
    c.bench_function("conv expert SGD step, batch 128", |b| {
        b.iter(|| {
            let (_, g) = net.loss_and_grads(&x, &y).unwrap();
            sgd_step(&mut net, &g, &cfg, &mut velocity).unwrap();
        })
    });
}

fn reservoir(c: &mut Criterion) {
    c.bench_function("reservoir capacity 2500, 100k offers", |b| {
        b.iter(|| {
            let mut buf = ReservoirBuffer::new(2500, 7);
            for i in 0..100_000u32 {
                buf.offer(i);
            }
            black_box(buf.len())
        })
    });
}

fn detector(c: &mut Criterion) {
    let ls = losses(10_000, 3);
    c.bench_function("detector update, 10k losses", |b| {
        b.iter(|| {
            let mut s = SmoothedLoss::absent();
            let mut w = LossWindow::new(100);
            let mut fired = 0;
            for &l in &ls {
                s = update_smoothed(s, l, 0.2).unwrap();
                if get_threshold(&w, 100).is_some_and(|t| s.value().unwrap() > t) {
                    fired += 1;
                }
                w.push(l);
            }
            black_box(fired)
        })
    });
}

criterion_group!(benches, network, reservoir, detector);
criterion_main!(benches);
