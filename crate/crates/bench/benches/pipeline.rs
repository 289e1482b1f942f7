//! Hot-path benchmarks: full-graph forward+backward, cached action-stream
//! inference, rendering, and the Euler sampler.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trimot::action::{interpolate, target_flow};
use trimot::config::{MaskMode, ModelConfig, RunConfig};
use trimot::depth::DepthMap;
use trimot::graph::Real;
use trimot::mot::{build_params, StreamSet};
use trimot::semantic::{image_patches, tokenize_instruction, Vocabulary};
use trimot::sim::{generate_scene, render, Suite};
use trimot::train::vla_sample_loss;
use trimot::PolicyModel;

fn bench_graph_forward_backward(c: &mut Criterion) {
    let mut cfg = RunConfig::vla_default(0);
    cfg.model = ModelConfig::compact();
    cfg.k = cfg.model.chunk_len;
    let m = cfg.model.clone();
    let params = build_params::<f32>(&m, StreamSet::full(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rgb: Array3<u8> = Array3::from_shape_fn((m.image_size, m.image_size, 3), |_| rng.gen());
    let sem = image_patches::<f32>(&rgb, &m).unwrap();
    let tokens = tokenize_instruction("pick red block", &Vocabulary::grammar(), m.text_len).unwrap();
    let proprio = vec![0.1f32; m.proprio_dim];
    let actions: Array2<f32> = Array2::from_shape_fn((m.chunk_len, m.action_dim), |_| {
        rng.gen_range(-0.9..0.9)
    });
    let eps: Array2<f32> =
        Array2::from_shape_fn((m.chunk_len, m.action_dim), |_| f32::standard_normal(&mut rng));
    let a_tau = interpolate(&actions, &eps, 0.5).unwrap();
    let u = target_flow(&actions, &eps).unwrap();
    let gt = DepthMap::all_valid(Array2::from_elem((m.image_size, m.image_size), 1.8f32));

    c.bench_function("vla_loss_forward_backward", |b| {
        b.iter(|| {
            let loss = vla_sample_loss(
                &cfg, &params, &sem, Some(&sem), &tokens, &proprio, &a_tau, 0.5, &u, None,
                Some(&gt),
            )
            .unwrap();
            let grads = loss.graph.backward(loss.total);
            criterion::black_box(grads.len())
        })
    });
}

fn bench_cached_inference(c: &mut Criterion) {
    let m = ModelConfig::compact();
    let params = build_params::<f32>(&m, StreamSet::full(), 1);
    let model = PolicyModel {
        cfg: &m,
        params: &params,
        mask_mode: MaskMode::Isolated,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rgb: Array3<u8> = Array3::from_shape_fn((m.image_size, m.image_size, 3), |_| rng.gen());
    let sem = image_patches::<f32>(&rgb, &m).unwrap();
    let tokens = tokenize_instruction("pick red block", &Vocabulary::grammar(), m.text_len).unwrap();
    let proprio = vec![0.1f32; m.proprio_dim];

    c.bench_function("build_context", |b| {
        b.iter(|| model.build_context(&sem, &tokens, Some(&sem)).unwrap())
    });

    let cache = model.build_context(&sem, &tokens, Some(&sem)).unwrap();
    let a_tau: Array2<f32> =
        Array2::from_shape_fn((m.chunk_len, m.action_dim), |_| f32::standard_normal(&mut rng));
    c.bench_function("action_forward_cached", |b| {
        b.iter(|| model.action_forward(&cache, &a_tau, 0.5, &proprio).unwrap())
    });

    c.bench_function("sample_chunk_s10", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(7),
            |mut r| model.sample_chunk(&cache, &proprio, 10, &mut r).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_render(c: &mut Criterion) {
    let (scene, task) = generate_scene(3, Suite::Stack);
    c.bench_function("render_64x64", |b| b.iter(|| render(&scene, &task.instruction)));
}

criterion_group!(benches, bench_graph_forward_backward, bench_cached_inference, bench_render);
criterion_main!(benches);
