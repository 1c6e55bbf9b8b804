//! Acceptance criteria, one pass/fail line each. Exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use skelgraph::data::{load_sequence, render_sequence_images, save_sequence, synthesize, window_samples, Motion, SynthConfig};
use skelgraph::losses::{all_pairs, evaluate_loss, LossKind, LossWeights};
use skelgraph::metrics::{ade, fde, stb_sigma};
use skelgraph::model::{ModelConfig, SkeletonGraph, VisionMode};
use skelgraph::trainer::{evaluate, train, Checkpoint, TrainConfig, FINAL_CHECKPOINT};
use skelgraph::DiffArray;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn metric_arithmetic() -> Outcome {
    let (gta_path, gta_pose) = ([154.0, 163.0, 172.0, 186.0], [198.0, 209.0, 217.0, 230.0]);
    let (prox_path, prox_pose) = ([264.0, 269.0, 272.0, 277.0], [281.0, 287.0, 291.0, 298.0]);
    let f1 = fde(&gta_pose, &gta_path).unwrap();
    let f2 = fde(&prox_pose, &prox_path).unwrap();
    let a = ade(&gta_pose, &gta_path).unwrap();
    let s = stb_sigma(&gta_pose, &gta_path).unwrap();
    let ok = f1 == 208.0 && f2 == 287.5 && (a - 191.1).abs() <= 0.1 && (s - 11.75).abs() <= 0.01;
    outcome(ok, format!("fde {f1} / {f2}, ade {a:.3}, stb {s:.4}"))
}

fn gradient_suite() -> Outcome {
    let mut worst: (f64, &str) = (0.0, "");
    for (name, case) in primitive_cases().into_iter().chain(loss_cases()) {
        let mut r = rng(0xacce);
        for _ in 0..100 {
            match case(&mut r) {
                Ok(e) if e > worst.0 => worst = (e, name),
                Ok(_) => {}
                Err(e) => return outcome(false, format!("{name}: {e}")),
            }
        }
    }
    match full_model_gradient(3) {
        Ok(e) if e > worst.0 => worst = (e, "tiny model"),
        Ok(_) => {}
        Err(e) => return outcome(false, format!("tiny model: {e}")),
    }
    outcome(worst.0 < GRAD_TOL, format!("max relative error {:.2e} ({})", worst.0, worst.1))
}

fn scl_invariance_suite() -> Outcome {
    let checks = scl_invariance(1000, 1e-9, 7);
    let detail = checks.iter().map(|c| format!("{} {:.1e}", c.name, c.value)).collect::<Vec<_>>().join("; ");
    outcome(checks.iter().all(|c| c.passed), detail)
}

fn gait(n: usize, length: usize, seed: u64) -> Vec<skelgraph::data::SkeletonSequence> {
    synthesize(&SynthConfig { n_sequences: n, length, joints: 5, seed, motion: Motion::Gait, ..SynthConfig::default() })
}

fn overfit_probe() -> Outcome {
    let samples: Vec<_> = gait(4, 16, 0).iter().flat_map(|s| window_samples(s, 8, 8, 8).unwrap()).collect();
    let config = TrainConfig {
        model: ModelConfig { obs_len: 8, pred_len: 8, joints: 5, ..ModelConfig::default() },
        epochs: 2000,
        ..TrainConfig::default()
    };
    let out = train::<f32>(&config, &samples, &[], 30.0, |_| {}).unwrap();
    let loss = out.history.last().unwrap().loss;
    let model = SkeletonGraph::new(config.model.clone()).unwrap();
    let ck = &out.checkpoint;
    let rep = evaluate(&model, &ck.state, &ck.normalization, &samples, 30.0, Path::new(".")).unwrap();
    let pose = rep.pose_curve.iter().sum::<f64>() / rep.pose_curve.len() as f64;
    outcome(
        loss < 1e-3 && pose < 10.0,
        format!("{} samples, final loss {loss:.2e}, pose MPJPE {pose:.2} mm", samples.len()),
    )
}

fn stability_probe() -> Outcome {
    let (t, tp, len) = (8, 8, 60);
    let train_set: Vec<_> = gait(16, len, 1).iter().flat_map(|s| window_samples(s, t, tp, 2).unwrap()).collect();
    let test_set: Vec<_> = gait(4, len, 2).iter().flat_map(|s| window_samples(s, t, tp, 1).unwrap()).collect();
    let epochs = 600;
    let config = TrainConfig {
        model: ModelConfig { obs_len: t, pred_len: tp, joints: 5, ..ModelConfig::default() },
        epochs,
        batch_size: 32,
        decay_every: epochs * 2 / 3 + 1,
        ..TrainConfig::default()
    };
    let out = train::<f32>(&config, &train_set, &[], 30.0, |_| {}).unwrap();
    let model = SkeletonGraph::new(config.model.clone()).unwrap();
    let ck = &out.checkpoint;
    let rep = evaluate(&model, &ck.state, &ck.normalization, &test_set, 30.0, Path::new(".")).unwrap();
    let mean = rep.ade;
    outcome(
        rep.stb_sigma < 0.25 * mean,
        format!(
            "{} train / {} test windows, STB {:.3} mm vs 0.25 x mean MPJPE {:.3} mm",
            train_set.len(),
            test_set.len(),
            rep.stb_sigma,
            0.25 * mean
        ),
    )
}

fn shape_contract() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for joints in [21, 25] {
        for vision in [VisionMode::None, VisionMode::LastImage, VisionMode::Sequence] {
            let config = ModelConfig { obs_len: 30, pred_len: 60, joints, vision, image_size: 64, ..ModelConfig::default() };
            let model = SkeletonGraph::new(config.clone()).unwrap();
            let state = model.init_params::<f64>(1);
            let input = random_input(&config, 1, &mut rng(joints as u64));
            let (out, _) = model.infer(&state, &input).unwrap();
            let target = poses(&mut rng(2), &[1, 60, joints, 3]);
            let pairs = all_pairs(joints);
            let losses: Vec<f64> = [LossKind::Cos, LossKind::L2, LossKind::Total]
                .iter()
                .map(|k| evaluate_loss(&target, &out, *k, LossWeights::default(), &pairs).unwrap())
                .collect();
            let good = out.shape() == [1, 60, joints, 3] && out.is_finite() && losses.iter().all(|l| l.is_finite());
            ok &= good;
            lines.push(format!("J={joints} {vision:?} {}", if good { "ok" } else { "bad" }));
        }
    }
    outcome(ok, lines.join(", "))
}

fn run_pipeline(dir: &Path) -> (Vec<u8>, String) {
    let mut seqs = gait(3, 24, 5);
    for (i, s) in seqs.iter_mut().enumerate() {
        save_sequence(s, dir.join(format!("seq_{i}.json"))).unwrap();
    }
    let seqs: Vec<_> = (0..3).map(|i| load_sequence(dir.join(format!("seq_{i}.json"))).unwrap()).collect();
    let samples: Vec<_> = seqs.iter().flat_map(|s| window_samples(s, 4, 8, 2).unwrap()).collect();
    let config = TrainConfig {
        model: ModelConfig { obs_len: 4, pred_len: 8, joints: 5, n_txcnn: 3, ..ModelConfig::default() },
        epochs: 5,
        batch_size: 4,
        seed: 9,
        checkpoint_dir: Some(dir.join("ckpt")),
        ..TrainConfig::default()
    };
    let out = train::<f32>(&config, &samples, &[], 30.0, |_| {}).unwrap();
    let model = SkeletonGraph::new(config.model.clone()).unwrap();
    let rep = evaluate(&model, &out.checkpoint.state, &out.checkpoint.normalization, &samples, 30.0, dir).unwrap();
    (std::fs::read(dir.join("ckpt").join(FINAL_CHECKPOINT)).unwrap(), serde_json::to_string(&rep).unwrap())
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ca, ra) = run_pipeline(a.path());
    let (cb, rb) = run_pipeline(b.path());
    outcome(ca == cb && ra == rb, format!("checkpoint {} bytes, report {} bytes", ca.len(), ra.len()))
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut seq = gait(1, 12, 3).remove(0);
    render_sequence_images(&mut seq, dir.path(), "img", 64).unwrap();
    let path = dir.path().join("seq.json");
    save_sequence(&seq, &path).unwrap();
    let seq_ok = load_sequence(&path).unwrap() == seq;

    let config = TrainConfig {
        model: ModelConfig { obs_len: 4, pred_len: 4, joints: 5, n_txcnn: 3, ..ModelConfig::default() },
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let samples = window_samples(&seq, 4, 4, 1).unwrap();
    let out = train::<f32>(&config, &samples, &[], 30.0, |_| {}).unwrap();
    let ck_path = dir.path().join("ck");
    out.checkpoint.save(&ck_path).unwrap();
    let loaded = Checkpoint::<f32>::load(&ck_path).unwrap();
    let model = SkeletonGraph::new(config.model.clone()).unwrap();
    let prepared = skelgraph::trainer::prepare::<f32>(&model, &samples, &out.checkpoint.normalization, dir.path()).unwrap();
    let graphs: Vec<_> = prepared.iter().map(|p| &p.graph).collect();
    let input = skelgraph::model::ModelInput::stack(&graphs, None).unwrap();
    let (before, _) = model.infer(&out.checkpoint.state, &input).unwrap();
    let (after, _) = model.infer(&loaded.state, &input).unwrap();
    let bits = |a: &DiffArray<f32>| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let ck_ok = bits(&before) == bits(&after) && loaded.normalization == out.checkpoint.normalization;
    outcome(seq_ok && ck_ok, format!("SKELSEQ identity {seq_ok}, checkpoint forward bit-exact {ck_ok}"))
}

fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    type Criterion = (&'static str, Duration, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("metric arithmetic", Duration::from_secs(1), metric_arithmetic),
        ("gradient suite", Duration::from_secs(120), gradient_suite),
        ("SCL invariance", Duration::from_secs(60), scl_invariance_suite),
        ("overfit probe", Duration::from_secs(600), overfit_probe),
        ("stability", Duration::from_secs(1800), stability_probe),
        ("shape contract", Duration::from_secs(60), shape_contract),
        ("determinism", Duration::MAX, determinism),
        ("round trips", Duration::MAX, round_trips),
    ];
    let mut failures = 0;
    for (name, budget, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| outcome(false, "panicked"));
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let passed = result.passed && in_time;
        failures += usize::from(!passed);
        let timing = if budget == Duration::MAX {
            format!("{:.1?}", elapsed)
        } else {
            format!("{:.1?} of {:?}{}", elapsed, budget, if in_time { "" } else { " OVER BUDGET" })
        };
        println!("[{}] {name}: {} ({timing})", if passed { "PASS" } else { "FAIL" }, result.detail);
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
