use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Frame, SkeletonSequence, Vec3};

/// Coordinates are snapped to multiples of 2^-40 m so that centering and
/// un-centering are exact in f64.
const GRID: f64 = 1_099_511_627_776.0; // 2^40

fn snap(v: f64) -> f64 {
    (v * GRID).round() / GRID
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Static,
    Linear,
    #[default]
    Gait,
}

impl std::str::FromStr for Motion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(Motion::Static),
            "linear" => Ok(Motion::Linear),
            "gait" => Ok(Motion::Gait),
            other => Err(format!("unknown motion `{other}` (static, linear, gait)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_sequences: usize,
    pub length: usize,
    pub joints: usize,
    pub fps: f64,
    pub seed: u64,
    pub motion: Motion,
    /// Torso velocity in m/s (camera frame).
    pub velocity: Vec3,
    /// Length of every limb segment, meters.
    pub bone_length: f64,
    /// Peak limb swing angle, radians.
    pub swing_amplitude: f64,
    /// Swing cycles per second.
    pub swing_hz: f64,
    /// Standard deviation of isotropic 2D observation noise.
    pub noise_2d: f64,
    /// Mean camera distance of the torso, meters.
    pub depth: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_sequences: 8,
            length: 90,
            joints: 21,
            fps: 30.0,
            seed: 0,
            motion: Motion::Gait,
            velocity: [1.0, 0.0, 0.0],
            bone_length: 0.25,
            swing_amplitude: 0.5,
            swing_hz: 1.0,
            noise_2d: 0.0,
            depth: 4.0,
        }
    }
}

/// Rest-pose description of the generated skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    /// Parent of each joint; the torso (joint 0) is its own parent.
    pub parents: Vec<usize>,
    /// Rest offset of each joint from its parent.
    pub offsets: Vec<Vec3>,
    /// Limb each joint belongs to (0 spine, 1/2 legs, 3/4 arms); torso is `None`.
    pub chain: Vec<Option<usize>>,
    pub bones: Vec<(usize, usize)>,
}

/// Five chains (spine, legs, arms) hanging off the torso, filled round-robin.
pub fn template_skeleton(joints: usize, bone_length: f64) -> Template {
    let s = bone_length / 0.25;
    let roots: [Vec3; 5] = [
        [0.0, bone_length, 0.0],
        [-0.1 * s, -0.05 * s, 0.0],
        [0.1 * s, -0.05 * s, 0.0],
        [-0.2 * s, 0.45 * s, 0.0],
        [0.2 * s, 0.45 * s, 0.0],
    ];
    let dirs: [Vec3; 5] = [
        [0.0, bone_length, 0.0],
        [0.0, -bone_length, 0.0],
        [0.0, -bone_length, 0.0],
        [0.0, -bone_length, 0.0],
        [0.0, -bone_length, 0.0],
    ];
    let mut parents = vec![0];
    let mut offsets = vec![[0.0; 3]];
    let mut chain = vec![None];
    let mut last = [0usize; 5];
    for i in 1..joints {
        let c = (i - 1) % 5;
        let first = last[c] == 0;
        parents.push(last[c]);
        offsets.push(if first { roots[c] } else { dirs[c] });
        chain.push(Some(c));
        last[c] = i;
    }
    let bones = (1..joints).map(|i| (parents[i], i)).collect();
    Template {
        parents,
        offsets,
        chain,
        bones,
    }
}

fn rotate_z(v: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c, v[2]]
}

fn pose(template: &Template, swing: f64) -> Vec<Vec3> {
    let mut rel = vec![[0.0; 3]; template.parents.len()];
    for i in 1..rel.len() {
        let p = template.parents[i];
        let is_root = p == 0;
        let angle = match template.chain[i] {
            Some(1) | Some(4) => swing,
            Some(2) | Some(3) => -swing,
            _ => 0.0,
        };
        let off = if is_root { template.offsets[i] } else { rotate_z(template.offsets[i], angle) };
        rel[i] = [rel[p][0] + off[0], rel[p][1] + off[1], rel[p][2] + off[2]];
    }
    rel
}

/// Generates seeded desk-scale walking sequences with orthographic 2D projections.
pub fn synthesize(config: &SynthConfig) -> Vec<SkeletonSequence> {
    let template = template_skeleton(config.joints.max(1), config.bone_length);
    (0..config.n_sequences)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let phase = rng.random_range(0.0..TAU);
            let start = [
                snap(rng.random_range(-0.5..0.5)),
                snap(rng.random_range(-0.5..0.5)),
                snap(config.depth + rng.random_range(-0.5..0.5)),
            ];
            let noise = (config.noise_2d > 0.0).then(|| Normal::new(0.0, config.noise_2d).expect("positive std"));
            let frames = (0..config.length)
                .map(|t| {
                    let time = t as f64 / config.fps;
                    let (shift, swing) = match config.motion {
                        Motion::Static => ([0.0; 3], config.swing_amplitude * phase.sin()),
                        Motion::Linear => (config.velocity.map(|v| v * time), 0.0),
                        Motion::Gait => (
                            config.velocity.map(|v| v * time),
                            config.swing_amplitude * (TAU * config.swing_hz * time + phase).sin(),
                        ),
                    };
                    let torso = [0, 1, 2].map(|k| start[k] + snap(shift[k]));
                    let p3d: Vec<Vec3> = pose(&template, swing)
                        .into_iter()
                        .map(|r| [0, 1, 2].map(|k| torso[k] + snap(r[k])))
                        .collect();
                    let p2d = p3d
                        .iter()
                        .map(|p| {
                            let mut q = [p[0], p[1]];
                            if let Some(n) = &noise {
                                q = q.map(|v| snap(v + n.sample(&mut rng)));
                            }
                            q
                        })
                        .collect();
                    Frame { p2d, p3d, image: None }
                })
                .collect();
            SkeletonSequence {
                joints: config.joints,
                fps: config.fps,
                bones: template.bones.clone(),
                path_joint: 0,
                frames,
            }
        })
        .collect()
}
