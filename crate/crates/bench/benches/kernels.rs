use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use prosody_morph::vcgan::{generator_loss_and_grad, Batch};
use prosody_morph::warp::{shoot, warp_pullback};
use prosody_morph::{
    register, synth_dataset, train, Contour, Direction, KernelSpec, LossWeights, ModelConfig, RegistrationConfig,
    SynthSpec, TrainConfig, VcganModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn contour(t: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = (0..t).map(|_| rng.random_range(100.0..200.0)).collect();
    let m = (0..t).map(|_| rng.random_range(-0.5..0.5)).collect();
    (p, m)
}

fn bench_shoot(c: &mut Criterion) {
    let mut g = c.benchmark_group("shoot");
    for t in [32, 128, 512] {
        let (p, m) = contour(t, 1);
        g.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, _| {
            b.iter(|| shoot(black_box(&p), black_box(&m), &KernelSpec::F0).unwrap())
        });
    }
    g.finish();
}

fn bench_pullback(c: &mut Criterion) {
    let mut g = c.benchmark_group("warp_pullback");
    for t in [32, 128] {
        let (p, m) = contour(t, 2);
        let up = vec![1.0; t];
        g.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, _| {
            b.iter(|| warp_pullback(black_box(&p), black_box(&m), &KernelSpec::F0, &up).unwrap())
        });
    }
    g.finish();
}

fn bench_register(c: &mut Criterion) {
    let (p, _) = contour(64, 3);
    let src = Contour::f0(p.clone()).unwrap();
    let tgt = Contour::f0(p.iter().map(|v| v + 20.0).collect()).unwrap();
    let cfg = RegistrationConfig {
        max_iters: 50,
        ..RegistrationConfig::default()
    };
    c.bench_function("register_64_frames_50_iters", |b| {
        b.iter(|| register(&src, &tgt, &cfg, &KernelSpec::F0).unwrap())
    });
}

fn toy_model(frames: usize, bins: usize) -> VcganModel {
    VcganModel::new(ModelConfig {
        width_divisor: 8,
        ..ModelConfig::new(frames, bins)
    })
    .unwrap()
}

fn bench_generator_grad(c: &mut Criterion) {
    let corpus = synth_dataset(&SynthSpec::toy(2, 32, 8, 4)).unwrap();
    let batch = Batch::new(corpus.source, corpus.target).unwrap();
    let model = toy_model(32, 8);
    let w = LossWeights::default();
    c.bench_function("generator_loss_and_grad_batch2", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| generator_loss_and_grad(&model, Direction::Forward, &batch, &w, &mut rng).unwrap())
    });
}

fn bench_train_epoch(c: &mut Criterion) {
    let corpus = synth_dataset(&SynthSpec::toy(4, 32, 8, 5)).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::toy()
    };
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("one_epoch_4_pairs", |b| {
        b.iter_batched(
            || toy_model(32, 8),
            |mut model| train(&mut model, &corpus, &cfg).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(
    benches,
    bench_shoot,
    bench_pullback,
    bench_register,
    bench_generator_grad,
    bench_train_epoch
);
criterion_main!(benches);
