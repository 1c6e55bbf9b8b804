mod common;

use common::*;
use proptest::prelude::*;
use skelgraph::data::{synthesize, window_samples, Motion, SynthConfig, Vec3};
use skelgraph::losses::LossKind;
use skelgraph::metrics::{ade, fde, mpjpe_curve, stb_sigma, JointSet};
use skelgraph::model::SkeletonGraph;
use skelgraph::DiffArray;

fn curve(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..500.0f64, len)
}

fn curves() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| (curve(n), curve(n)))
}

fn frames() -> impl Strategy<Value = (Vec<Vec<Vec3>>, Vec<Vec<Vec3>>)> {
    (1usize..6, 1usize..6).prop_flat_map(|(t, j)| {
        let f = prop::collection::vec(prop::collection::vec(prop::array::uniform3(-2.0..2.0f64), j), t);
        (f.clone(), f)
    })
}

fn as_array(f: &[Vec<Vec3>]) -> DiffArray<f64> {
    let (t, j) = (f.len(), f[0].len());
    DiffArray::new(vec![t, j, 3], f.iter().flatten().flatten().copied().collect()).unwrap()
}

#[test]
fn scl_invariances_hold_over_1000_trials() {
    for check in scl_invariance(1000, 1e-9, 42) {
        assert!(check.passed, "{}: {:e}", check.name, check.value);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn stb_is_translation_invariant_and_homogeneous((pose, path) in curves(), c in -100.0..100.0f64, k in 0.1..10.0f64) {
        let base = stb_sigma(&pose, &path).unwrap();
        let shift = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<_>>();
        let scale = |v: &[f64]| v.iter().map(|x| x * k).collect::<Vec<_>>();
        prop_assert!((stb_sigma(&shift(&pose), &shift(&path)).unwrap() - base).abs() < 1e-6);
        prop_assert!((stb_sigma(&scale(&pose), &scale(&path)).unwrap() - k * base).abs() < 1e-6 * (1.0 + k * base));
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn ade_and_fde_are_bounded_by_the_curves((pose, path) in curves()) {
        let a = ade(&pose, &path).unwrap();
        let lo = pose.iter().chain(&path).copied().fold(f64::INFINITY, f64::min);
        let hi = pose.iter().chain(&path).copied().fold(0.0, f64::max);
        prop_assert!(a >= lo / 2.0 - 1e-9 && a <= hi + 1e-9);
        let f = fde(&pose, &path).unwrap();
        prop_assert!((f - (pose[pose.len() - 1] + path[path.len() - 1]) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn mpjpe_is_zero_on_identity_and_symmetric((gt, pred) in frames()) {
        let zero = mpjpe_curve(&gt, &gt, JointSet::All).unwrap();
        prop_assert!(zero.iter().all(|v| *v == 0.0));
        let ab = mpjpe_curve(&gt, &pred, JointSet::All).unwrap();
        let ba = mpjpe_curve(&pred, &gt, JointSet::All).unwrap();
        prop_assert_eq!(&ab, &ba);
        prop_assert!(ab.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn mpjpe_is_invariant_under_shared_rigid_motion((gt, pred) in frames(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let rot = rotation(&mut r);
        let shift = [0.3, -1.0, 2.0];
        let back = |a: DiffArray<f64>, j: usize| -> Vec<Vec<Vec3>> {
            a.data().chunks(3 * j).map(|f| f.chunks(3).map(|p| [p[0], p[1], p[2]]).collect()).collect()
        };
        let j = gt[0].len();
        let g2 = back(transform(&as_array(&gt), &rot, shift), j);
        let p2 = back(transform(&as_array(&pred), &rot, shift), j);
        let a = mpjpe_curve(&gt, &pred, JointSet::All).unwrap();
        let b = mpjpe_curve(&g2, &p2, JointSet::All).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn losses_are_non_negative_and_vanish_on_identity(seed in any::<u64>()) {
        let mut r = rng(seed);
        let target = poses(&mut r, &[3, 4, 3]);
        let pred = poses(&mut r, &[3, 4, 3]);
        for kind in [LossKind::Cos, LossKind::L2, LossKind::Total] {
            prop_assert!(loss_value(kind, &target, &pred) >= 0.0);
            prop_assert_eq!(loss_value(kind, &target, &target), 0.0);
        }
    }

    #[test]
    fn windows_tile_the_sequence(len in 1usize..60, t in 1usize..12, tp in 1usize..12, stride in 1usize..7) {
        let seq = &synthesize(&SynthConfig { n_sequences: 1, length: len, joints: 5, motion: Motion::Gait, ..SynthConfig::default() })[0];
        let windows = window_samples(seq, t, tp, stride).unwrap();
        let expected = if len >= t + tp { (len - t - tp) / stride + 1 } else { 0 };
        prop_assert_eq!(windows.len(), expected);
        for (k, w) in windows.iter().enumerate() {
            prop_assert_eq!(w.start, k * stride);
            prop_assert_eq!(w.obs_len(), t);
            prop_assert_eq!(w.pred_len(), tp);
            let last = w.start + t + tp - 1;
            prop_assert!(last < len);
            let abs = w.absolute_target();
            for (i, f) in abs.iter().enumerate() {
                for (a, b) in f.iter().zip(&seq.frames[w.start + t + i].p3d) {
                    for c in 0..3 {
                        prop_assert!((a[c] - b[c]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_shape_follows_configuration(t in 2usize..7, tp in 1usize..9, j in 2usize..8, n_txcnn in 3usize..6, batch in 1usize..3, seed in any::<u64>()) {
        let config = skelgraph::model::ModelConfig { obs_len: t, pred_len: tp, joints: j, n_txcnn, ..tiny_model_config() };
        let model = SkeletonGraph::new(config.clone()).unwrap();
        let state = model.init_params::<f64>(seed);
        let input = random_input(&config, batch, &mut rng(seed));
        let (out, adj) = model.infer(&state, &input).unwrap();
        prop_assert_eq!(out.shape(), &[batch, tp, j, 3]);
        prop_assert_eq!(adj.shape(), &[batch, t, j, j]);
        prop_assert!(out.is_finite());
    }
}
