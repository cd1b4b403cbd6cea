use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ghvae_core::data::dataset::{generate_episodes, DatasetConfig};
use ghvae_core::data::sim::WorldConfig;
use ghvae_core::metrics::ssim;
use ghvae_core::model::{train_phase, GhvaeStack, Horizon, ImageSpec, ModelConfig, TrainMode, TrainPhaseConfig};
use ghvae_core::planner::select_best;
use ghvae_core::tensor::nn::{conv_gru_step, GruVars};
use ghvae_core::tensor::{Padding, Tape, Tensor};

fn ramp(shape: Vec<usize>) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 7919) % 101) as f32 / 101.0 - 0.5)
}

fn conv(c: &mut Criterion) {
    let x = ramp(vec![16, 32, 32, 8]);
    let w = ramp(vec![3, 3, 8, 16]);
    let b = ramp(vec![16]);
    c.bench_function("conv2d 16x32x32x8 -> 16, 3x3", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (x, w, b) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
            black_box(tape.conv2d(x, w, b, 1, Padding::Same).unwrap());
        })
    });
}

fn gru(c: &mut Criterion) {
    let (state, input) = (ramp(vec![16, 16, 16, 8]), ramp(vec![16, 16, 16, 16]));
    let gate = ramp(vec![3, 3, 24, 8]);
    let bias = ramp(vec![8]);
    c.bench_function("conv-GRU step 16x16x16, 16 -> 8", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let s = tape.constant(state.clone());
            let i = tape.constant(input.clone());
            let mut leaf = |t: &Tensor<f32>| tape.constant(t.clone());
            let w = GruVars {
                update_w: leaf(&gate),
                update_b: leaf(&bias),
                reset_w: leaf(&gate),
                reset_b: leaf(&bias),
                cand_w: leaf(&gate),
                cand_b: leaf(&bias),
            };
            black_box(conv_gru_step(&mut tape, s, i, &w).unwrap());
        })
    });
}

fn training_step(c: &mut Criterion) {
    let world = WorldConfig::default();
    let episodes = generate_episodes(&DatasetConfig {
        episodes: 32,
        length: 7,
        world,
        seed: 0,
    })
    .unwrap();
    let image = ImageSpec {
        height: 32,
        width: 32,
        channels: 1,
    };
    let config = ModelConfig {
        action_dim: 2,
        ..ModelConfig::default()
    };
    let mut stack = GhvaeStack::new(image, (8, 4), config, 0).unwrap();
    let phase = TrainPhaseConfig {
        phase: 1,
        batch_size: 16,
        horizon: Horizon { context: 2, horizon: 5 },
        lr: 1e-3,
        steps: 1,
        seed: 0,
        mode: TrainMode::Greedy,
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("greedy phase-1 step, B=16", |bench| {
        bench.iter(|| black_box(train_phase(&mut stack, &episodes, &phase, |_| {}).unwrap()))
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let (a, b) = (ramp(vec![64, 64, 3]).map(|v| v + 0.5), ramp(vec![64, 64, 3]).map(|v| 0.5 - v));
    c.bench_function("ssim 64x64x3", |bench| bench.iter(|| black_box(ssim(&a, &b).unwrap())));
}

fn planner(c: &mut Criterion) {
    let goal = ramp(vec![32, 32, 1]);
    let frames: Vec<Vec<Tensor<f32>>> = (0..140)
        .map(|b| (0..10).map(|t| Tensor::from_fn(vec![32, 32, 1], |i| ((i + b * 10 + t) % 13) as f32 / 13.0)).collect())
        .collect();
    c.bench_function("select_best 140x10 frames of 32x32", |bench| {
        bench.iter(|| black_box(select_best(&frames, &goal).unwrap()))
    });
}

criterion_group!(benches, conv, gru, training_step, metrics, planner);
criterion_main!(benches);
