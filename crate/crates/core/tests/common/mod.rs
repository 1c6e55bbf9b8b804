#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skelgraph::diffarray::{gradient_check, NormConfig, NormMode, RunningStats, COSINE_EPS};
use skelgraph::losses::{all_pairs, data_term, scl_cos, scl_l2, total_loss, LossWeights};
use skelgraph::model::{ModelConfig, ModelInput, Phase, SkeletonGraph, SpatioTemporalGraph};
use skelgraph::{DiffArray, Tape, Var};

pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values with magnitude in `[0.1, 1)` and random sign, away from kinks.
pub fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> DiffArray<f64> {
    DiffArray::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

pub fn poses(rng: &mut ChaCha8Rng, shape: &[usize]) -> DiffArray<f64> {
    DiffArray::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces any tensor to a scalar with fixed random weights so every output entry matters.
fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> skelgraph::Result<Var> {
    let mut r = rng(seed);
    let shape = t.shape(y).to_vec();
    let w = t.constant(rand_arr(&mut r, &shape));
    let p = t.mul(y, w)?;
    t.sum(p)
}

pub type Case = Box<dyn Fn(&mut ChaCha8Rng) -> skelgraph::Result<f64>>;

fn check<F>(f: F, point: Vec<DiffArray<f64>>) -> skelgraph::Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> skelgraph::Result<Var>,
{
    let report = gradient_check(f, &point, GRAD_TOL)?;
    Ok(report.max_rel_error())
}

fn dims(r: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(lo..=hi)).collect()
}

/// Finite-difference cases for every primitive and loss; each returns the worst relative error.
pub fn primitive_cases() -> Vec<(&'static str, Case)> {
    let mut cases: Vec<(&'static str, Case)> = Vec::new();
    macro_rules! binary {
        ($name:literal, $op:ident) => {
            cases.push((
                $name,
                Box::new(|r| {
                    let s = dims(r, 3, 1, 3);
                    let pt = vec![rand_arr(r, &s), rand_arr(r, &s)];
                    let seed = r.random();
                    check(|t, v| { let y = t.$op(v[0], v[1])?; weighted_sum(t, y, seed) }, pt)
                }),
            ))
        };
    }
    macro_rules! unary {
        ($name:literal, |$t:ident, $x:ident| $body:expr) => {
            cases.push((
                $name,
                Box::new(|r| {
                    let s = dims(r, 3, 1, 3);
                    let pt = vec![rand_arr(r, &s)];
                    let seed = r.random();
                    check(|$t, v| { let $x = v[0]; let y = $body?; weighted_sum($t, y, seed) }, pt)
                }),
            ))
        };
    }
    binary!("add", add);
    binary!("sub", sub);
    binary!("mul", mul);
    unary!("scale", |t, x| t.scale(x, -1.7));
    unary!("abs", |t, x| t.abs(x));
    unary!("square", |t, x| t.square(x));
    unary!("sum", |t, x| t.sum(x));
    unary!("mean", |t, x| t.mean(x));
    unary!("norm_last", |t, x| t.norm_last(x));
    unary!("reshape", |t, x| {
        let n = t.shape(x).iter().product::<usize>();
        t.reshape(x, &[n, 1])
    });
    unary!("permute", |t, x| t.permute(x, &[2, 0, 1]));
    cases.push((
        "concat",
        Box::new(|r| {
            let s = dims(r, 3, 1, 3);
            let mut s2 = s.clone();
            s2[1] += 1;
            let pt = vec![rand_arr(r, &s), rand_arr(r, &s2)];
            let seed = r.random();
            check(|t, v| { let y = t.concat(&[v[0], v[1]], 1)?; weighted_sum(t, y, seed) }, pt)
        }),
    ));
    cases.push((
        "index_select",
        Box::new(|r| {
            let s = dims(r, 3, 2, 4);
            let idx: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(0..s[1])).collect();
            let pt = vec![rand_arr(r, &s)];
            let seed = r.random();
            check(|t, v| { let y = t.index_select(v[0], 1, &idx)?; weighted_sum(t, y, seed) }, pt)
        }),
    ));
    cases.push((
        "conv2d",
        Box::new(|r| {
            let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
            let k = [1, 3][r.random_range(0..2)];
            let (stride, pad) = (r.random_range(1..=2), r.random_range(0..=1));
            let (h, w) = (r.random_range(k..=5), r.random_range(k..=5));
            let pt = vec![rand_arr(r, &[2, cin, h, w]), rand_arr(r, &[cout, cin, k, k]), rand_arr(r, &[cout])];
            let seed = r.random();
            check(|t, v| { let y = t.conv2d(v[0], v[1], Some(v[2]), pad, stride)?; weighted_sum(t, y, seed) }, pt)
        }),
    ));
    cases.push((
        "batch_norm_train",
        Box::new(|r| {
            let c = r.random_range(1..=3);
            let pt = vec![rand_arr(r, &[3, c, 2, 2]), rand_arr(r, &[c]), rand_arr(r, &[c])];
            let seed = r.random();
            check(
                |t, v| {
                    let y = t.batch_norm(v[0], v[1], v[2], NormMode::Train(None), NormConfig::default())?;
                    weighted_sum(t, y, seed)
                },
                pt,
            )
        }),
    ));
    cases.push((
        "batch_norm_eval",
        Box::new(|r| {
            let c = r.random_range(1..=3);
            let stats = RunningStats {
                mean: (0..c).map(|_| r.random_range(-1.0..1.0)).collect(),
                var: (0..c).map(|_| r.random_range(0.5..2.0)).collect(),
            };
            let pt = vec![rand_arr(r, &[2, c, 3]), rand_arr(r, &[c]), rand_arr(r, &[c])];
            let seed = r.random();
            check(
                |t, v| {
                    let y = t.batch_norm(v[0], v[1], v[2], NormMode::Eval(&stats), NormConfig::default())?;
                    weighted_sum(t, y, seed)
                },
                pt,
            )
        }),
    ));
    cases.push((
        "prelu",
        Box::new(|r| {
            let s = dims(r, 3, 1, 3);
            let slope = if r.random_bool(0.5) { vec![1] } else { vec![s[1]] };
            let pt = vec![rand_arr(r, &s), rand_arr(r, &slope)];
            let seed = r.random();
            check(|t, v| { let y = t.prelu(v[0], v[1])?; weighted_sum(t, y, seed) }, pt)
        }),
    ));
    cases.push((
        "graph_aggregate",
        Box::new(|r| {
            let [n, f, ts, j] = [r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3), r.random_range(2..=4)];
            let pt = vec![rand_arr(r, &[n, f, ts, j]), rand_arr(r, &[n, ts, j, j])];
            let seed = r.random();
            check(|t, v| { let y = t.graph_aggregate(v[0], v[1])?; weighted_sum(t, y, seed) }, pt)
        }),
    ));
    cases.push((
        "adaptive_avg_pool2d",
        Box::new(|r| {
            let (h, w) = (r.random_range(2..=6), r.random_range(2..=6));
            let (oh, ow) = (r.random_range(1..=h), r.random_range(1..=w));
            let pt = vec![rand_arr(r, &[1, 2, h, w])];
            let seed = r.random();
            check(|t, v| { let y = t.adaptive_avg_pool2d(v[0], oh, ow)?; weighted_sum(t, y, seed) }, pt)
        }),
    ));
    cases.push((
        "cosine_last",
        Box::new(|r| {
            let s = vec![r.random_range(1..=4), 3];
            let pt = vec![rand_arr(r, &s), rand_arr(r, &s)];
            let seed = r.random();
            check(|t, v| { let y = t.cosine_last(v[0], v[1], COSINE_EPS)?; weighted_sum(t, y, seed) }, pt)
        }),
    ));
    cases
}

pub fn loss_cases() -> Vec<(&'static str, Case)> {
    fn point(r: &mut ChaCha8Rng) -> Vec<DiffArray<f64>> {
        let s = [r.random_range(1..=3), r.random_range(2..=5), 3];
        vec![poses(r, &s), poses(r, &s)]
    }
    let mut cases: Vec<(&'static str, Case)> = Vec::new();
    cases.push((
        "scl_cos",
        Box::new(|r| {
            let pt = point(r);
            let pairs = all_pairs(pt[0].shape()[1]);
            check(|t, v| scl_cos(t, v[0], v[1], &pairs), pt)
        }),
    ));
    cases.push(("scl_l2", Box::new(|r| check(|t, v| scl_l2(t, v[0], v[1]), point(r)))));
    cases.push(("data_term", Box::new(|r| check(|t, v| data_term(t, v[0], v[1]), point(r)))));
    cases.push((
        "total_loss",
        Box::new(|r| {
            let pt = point(r);
            let pairs = all_pairs(pt[0].shape()[1]);
            let w = LossWeights { lambda1: 0.3, lambda2: 0.7 };
            check(|t, v| total_loss(t, v[0], v[1], w, &pairs), pt)
        }),
    ));
    cases
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        obs_len: 4,
        pred_len: 4,
        joints: 5,
        n_spgcnn: 1,
        n_txcnn: 3,
        ..ModelConfig::default()
    }
}

fn chain_bones(j: usize) -> Vec<(usize, usize)> {
    (1..j).map(|i| (i - 1, i)).collect()
}

pub fn random_input(config: &ModelConfig, batch: usize, r: &mut ChaCha8Rng) -> ModelInput<f64> {
    let graphs: Vec<SpatioTemporalGraph<f64>> = (0..batch)
        .map(|_| {
            let v = poses(r, &[config.obs_len, config.joints, 2]);
            SpatioTemporalGraph::from_bones(v, chain_bones(config.joints)).unwrap()
        })
        .collect();
    let refs: Vec<&SpatioTemporalGraph<f64>> = graphs.iter().collect();
    let c = config.image_input_channels();
    let images: Vec<DiffArray<f64>> = (0..if c > 0 { batch } else { 0 })
        .map(|_| DiffArray::from_fn(&[c, config.image_size, config.image_size], |_| r.random_range(0.0..1.0)))
        .collect();
    let image_refs: Vec<&DiffArray<f64>> = images.iter().collect();
    let images = (c > 0).then_some(image_refs.as_slice());
    ModelInput::stack(&refs, images).unwrap()
}

/// Central differences over every parameter of the tiny model against reverse mode,
/// with the full training loss in train mode (batch statistics).
pub fn full_model_gradient(seed: u64) -> skelgraph::Result<f64> {
    let config = tiny_model_config();
    let model = SkeletonGraph::new(config.clone())?;
    let mut r = rng(seed);
    let mut state = model.init_params::<f64>(seed);
    let input = random_input(&config, 2, &mut r);
    let target = poses(&mut r, &[2, config.pred_len, config.joints, 3]);
    let pairs = all_pairs(config.joints);
    let weights = LossWeights { lambda1: 0.5, lambda2: 0.5 };

    let loss_of = |state: &skelgraph::model::ModelParams<f64>, grads: bool| -> skelgraph::Result<(f64, Vec<Vec<f64>>)> {
        let mut stats = state.stats.clone();
        let mut tape = Tape::new();
        let bind = state.params.bind(&mut tape);
        let out = model.forward(&mut tape, &bind, Phase::Train(&mut stats), &input)?;
        let t = tape.constant(target.clone());
        let loss = total_loss(&mut tape, t, out.poses, weights, &pairs)?;
        let value = tape.value(loss).item();
        let mut g = Vec::new();
        if grads {
            tape.backward(loss)?;
            for (name, _) in state.params.iter() {
                let var = bind.get(name)?;
                g.push(tape.grad(var).map(<[f64]>::to_vec).unwrap_or_default());
            }
        }
        Ok((value, g))
    };

    let (_, analytic) = loss_of(&state, true)?;
    let names: Vec<String> = state.params.names().map(str::to_string).collect();
    let mut worst: f64 = 0.0;
    for (name, grad) in names.iter().zip(&analytic) {
        let len = state.params.get(name).unwrap().len();
        for k in 0..len {
            let x0 = state.params.get(name).unwrap().data()[k];
            let h = 1e-6 * x0.abs().max(1.0);
            state.params.get_mut(name).unwrap().data_mut()[k] = x0 + h;
            let fp = loss_of(&state, false)?.0;
            state.params.get_mut(name).unwrap().data_mut()[k] = x0 - h;
            let fm = loss_of(&state, false)?.0;
            state.params.get_mut(name).unwrap().data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.get(k).copied().unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Random rotation matrix (unit quaternion).
pub fn rotation(r: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let q: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Applies `p -> R p + t` to every joint of a `[..., 3]` array.
pub fn transform(a: &DiffArray<f64>, rot: &[[f64; 3]; 3], shift: [f64; 3]) -> DiffArray<f64> {
    let data: Vec<f64> = a
        .data()
        .chunks(3)
        .flat_map(|p| (0..3).map(move |i| rot[i][0] * p[0] + rot[i][1] * p[1] + rot[i][2] * p[2] + shift[i]))
        .collect();
    DiffArray::new(a.shape().to_vec(), data).unwrap()
}

pub const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn loss_value(kind: skelgraph::losses::LossKind, target: &DiffArray<f64>, pred: &DiffArray<f64>) -> f64 {
    let pairs = all_pairs(target.shape()[target.shape().len() - 2]);
    skelgraph::losses::evaluate_loss(target, pred, kind, LossWeights::default(), &pairs).unwrap()
}

pub struct Invariance {
    pub name: &'static str,
    /// Largest deviation seen for invariances, smallest change seen for the sensitivity check.
    pub value: f64,
    pub passed: bool,
}

/// Randomized SCL invariance trials on `[T̃, J, 3]` poses.
pub fn scl_invariance(trials: usize, tol: f64, seed: u64) -> Vec<Invariance> {
    use skelgraph::losses::LossKind::{Cos, L2};
    let mut r = rng(seed);
    let mut dev = [0.0f64; 5];
    let mut min_change = f64::INFINITY;
    for _ in 0..trials {
        let shape = [r.random_range(1..=4), r.random_range(2..=6), 3];
        let target = poses(&mut r, &shape);
        let pred = poses(&mut r, &shape);
        let s: f64 = r.random_range(0.1..10.0);
        let scaled = DiffArray::new(pred.shape().to_vec(), pred.data().iter().map(|v| v * s).collect()).unwrap();
        let rot = rotation(&mut r);
        let shift = [0, 1, 2].map(|_| r.random_range(-2.0..2.0));
        let rotated = transform(&pred, &rot, [0.0; 3]);
        let moved = transform(&pred, &rot, shift);
        let translated = transform(&pred, &IDENTITY, shift);
        let base_cos = loss_value(Cos, &target, &pred);
        let base_l2 = loss_value(L2, &target, &pred);
        dev[0] = dev[0].max((loss_value(Cos, &target, &scaled) - base_cos).abs());
        dev[1] = dev[1].max((loss_value(Cos, &target, &rotated) - base_cos).abs());
        dev[2] = dev[2].max((loss_value(L2, &target, &rotated) - base_l2).abs());
        dev[3] = dev[3].max((loss_value(L2, &target, &moved) - base_l2).abs());
        dev[4] = dev[4].max((loss_value(L2, &target, &translated) - base_l2).abs());
        min_change = min_change.min((loss_value(Cos, &target, &translated) - base_cos).abs());
    }
    let names = [
        "scl_cos scale invariance",
        "scl_cos rotation invariance",
        "scl_l2 rotation invariance",
        "scl_l2 rigid-motion invariance",
        "scl_l2 translation invariance",
    ];
    let mut out: Vec<Invariance> = names
        .iter()
        .zip(dev)
        .map(|(name, d)| Invariance { name, value: d, passed: d < tol })
        .collect();
    out.push(Invariance {
        name: "scl_cos translation sensitivity",
        value: min_change,
        passed: min_change > tol,
    });
    out
}
