use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skelgraph::losses::{all_pairs, total_loss, LossWeights};
use skelgraph::metrics::{report, stb_sigma};
use skelgraph::model::{ModelConfig, ModelInput, Phase, SkeletonGraph, SpatioTemporalGraph};
use skelgraph::{DiffArray, Tape};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> DiffArray<f32> {
    DiffArray::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, &[8, 21, 30, 21]);
    let k = random(&mut rng, &[21, 21, 3, 3]);
    c.bench_function("conv2d 8x21x30x21 k3", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let kv = tape.constant(k.clone());
            black_box(tape.conv2d(xv, kv, None, 1, 1).unwrap());
        })
    });
}

fn full_size_input(config: &ModelConfig, batch: usize) -> ModelInput<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bones: Vec<(usize, usize)> = (1..config.joints).map(|i| (i - 1, i)).collect();
    let graphs: Vec<SpatioTemporalGraph<f32>> = (0..batch)
        .map(|_| SpatioTemporalGraph::from_bones(random(&mut rng, &[config.obs_len, config.joints, 2]), bones.clone()).unwrap())
        .collect();
    let refs: Vec<&SpatioTemporalGraph<f32>> = graphs.iter().collect();
    ModelInput::stack(&refs, None).unwrap()
}

fn model(c: &mut Criterion) {
    let config = ModelConfig::default();
    let net = SkeletonGraph::new(config.clone()).unwrap();
    let state = net.init_params::<f32>(0);
    let input = full_size_input(&config, 8);
    let target = random(&mut ChaCha8Rng::seed_from_u64(2), &[8, config.pred_len, config.joints, 3]);
    let pairs = all_pairs(config.joints);

    c.bench_function("forward T=30 T~=60 J=21 batch 8", |b| b.iter(|| black_box(net.infer(&state, &input).unwrap())));
    c.bench_function("forward+backward T=30 T~=60 J=21 batch 8", |b| {
        b.iter(|| {
            let mut stats = state.stats.clone();
            let mut tape = Tape::new();
            let bind = state.params.bind(&mut tape);
            let out = net.forward(&mut tape, &bind, Phase::Train(&mut stats), &input).unwrap();
            let t = tape.constant(target.clone());
            let loss = total_loss(&mut tape, t, out.poses, LossWeights::default(), &pairs).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.grad(bind.get("input_embed.weight").unwrap()).map(<[f32]>::len));
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut frames = |n: usize| -> Vec<Vec<[f64; 3]>> {
        (0..n).map(|_| (0..21).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect()).collect()
    };
    let (gt, pred) = (frames(60), frames(60));
    c.bench_function("metrics report T~=60 J=21", |b| b.iter(|| black_box(report(&gt, &pred, 0, 30.0).unwrap())));
    let curve: Vec<f64> = (0..60).map(|i| i as f64).collect();
    c.bench_function("stb_sigma 60 steps", |b| b.iter(|| black_box(stb_sigma(&curve, &curve).unwrap())));
}

criterion_group!(benches, conv2d, model, metrics);
criterion_main!(benches);
