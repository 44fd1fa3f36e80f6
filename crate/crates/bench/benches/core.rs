use std::hint::black_box;

use biact_bench::{fresh_policy, small_dataset};
use biact_core::observation::View;
use biact_core::runtime::{home_angles, Rig};
use biact_core::tensor::{Tape, Tensor};
use biact_core::{Plant, Renderer, SimConfig, Trainer};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn plant(c: &mut Criterion) {
    let cfg = SimConfig::default();
    let plant = Plant::new(cfg.arm.clone(), cfg.object.clone(), &cfg.scene).unwrap();
    let scene = plant.initial_state(&home_angles(&cfg)).unwrap();
    let tau = vec![0.01; plant.n_joints()];
    c.bench_function("plant_step", |b| {
        b.iter(|| plant.step(black_box(&scene), &tau, &tau, cfg.scene.dt).unwrap())
    });

    let mut rig = Rig::new(&cfg, cfg.object.clone(), &home_angles(&cfg)).unwrap();
    let load = vec![-0.05; rig.n_joints()];
    let zero = vec![0.0; rig.n_joints()];
    c.bench_function("bilateral_step", |b| b.iter(|| rig.step_bilateral(black_box(&load), &zero).unwrap()));
}

fn render(c: &mut Criterion) {
    let cfg = SimConfig::default();
    let rig = Rig::new(&cfg, cfg.object.clone(), &home_angles(&cfg)).unwrap();
    let r = Renderer::new(&cfg.arm, &cfg.object, &cfg.scene);
    c.bench_function("render_overhead_64", |b| b.iter(|| r.render(black_box(&rig.scene), View::Overhead)));
    c.bench_function("render_gripper_64", |b| b.iter(|| r.render(black_box(&rig.scene), View::Gripper)));
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::randn(&[8, 33, 32], 1.0, &mut rng);
    let w = Tensor::randn(&[32, 64], 1.0, &mut rng);
    c.bench_function("matmul_fwd_bwd_8x33x32x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (x, y) = (tape.param(&a), tape.param(&w));
            let z = tape.matmul(x, y).unwrap();
            let s = tape.sum_all(z);
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn policy(c: &mut Criterion) {
    let cfg = SimConfig::default();
    let data = small_dataset(&cfg);
    let policy = fresh_policy(&cfg, &data);
    let obs = data.episodes[0].observation(100);
    c.bench_function("policy_inference", |b| {
        b.iter(|| policy.act(black_box(&obs.follower_state), &obs.overhead, &obs.gripper_view).unwrap())
    });

    let batch = data.sample_batch(cfg.model.batch_size, cfg.model.chunk_k, 3).unwrap();
    let mut trainer = Trainer::new(policy, 3);
    let mut g = c.benchmark_group("training");
    g.sample_size(20);
    g.bench_function("training_step_b8", |b| b.iter(|| trainer.training_step(black_box(&batch)).unwrap()));
    g.finish();
}

criterion_group!(benches, plant, render, matmul, policy);
criterion_main!(benches);
