//! Skeleton sequences, sample extraction and the synthetic motion generator.

mod format;
mod images;
mod prediction;
mod synth;

use serde::{Deserialize, Serialize};

use crate::diffarray::DiffArray;
use crate::error::{Error, Result};
use crate::model::SpatioTemporalGraph;
use crate::scalar::Scalar;

pub use format::{load_sequence, parse_sequence, save_sequence, sequence_to_json, SKELSEQ_VERSION};
pub use images::{load_image_tensor, procedural_image, render_sequence_images, sample_image_tensor};
pub use prediction::{PredictedFrame, PredictedWindow, PredictionDocument, PREDICTION_VERSION};
pub use synth::{synthesize, template_skeleton, Motion, SynthConfig};

pub type Vec2 = [f64; 2];
pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// `J x 2` image-plane coordinates.
    pub p2d: Vec<Vec2>,
    /// `J x 3` camera-frame coordinates in meters.
    pub p3d: Vec<Vec3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub joints: usize,
    pub fps: f64,
    pub bones: Vec<(usize, usize)>,
    pub path_joint: usize,
    pub frames: Vec<Frame>,
}

impl SkeletonSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |m: String| Error::format("sequence", m);
        if self.joints == 0 {
            return Err(ctx("joints must be >= 1".into()));
        }
        if !(self.fps > 0.0) || !self.fps.is_finite() {
            return Err(ctx(format!("fps must be positive, got {}", self.fps)));
        }
        if self.path_joint >= self.joints {
            return Err(ctx(format!("path_joint {} out of range for {} joints", self.path_joint, self.joints)));
        }
        if let Some((i, (a, b))) = self.bones.iter().enumerate().find(|(_, (a, b))| *a >= self.joints || *b >= self.joints) {
            return Err(ctx(format!("bone {i} ({a}, {b}) out of range for {} joints", self.joints)));
        }
        if self.frames.is_empty() {
            return Err(ctx("frames list is empty".into()));
        }
        for (k, f) in self.frames.iter().enumerate() {
            if f.p2d.len() != self.joints || f.p3d.len() != self.joints {
                return Err(ctx(format!(
                    "frame {k}: expected {} joints, got p2d {} / p3d {}",
                    self.joints,
                    f.p2d.len(),
                    f.p3d.len()
                )));
            }
            let finite = f.p2d.iter().flatten().chain(f.p3d.iter().flatten()).all(|v| v.is_finite());
            if !finite {
                return Err(ctx(format!("frame {k}: non-finite coordinate")));
            }
        }
        Ok(())
    }

    pub fn p3d_frames(&self) -> Vec<Vec<Vec3>> {
        self.frames.iter().map(|f| f.p3d.clone()).collect()
    }

    pub fn has_images(&self) -> bool {
        self.frames.iter().any(|f| f.image.is_some())
    }
}

/// Binary skeleton adjacency: ones on bones (both directions) and self-loops, replicated over `steps`.
pub fn build_adjacency<S: Scalar>(bones: &[(usize, usize)], joints: usize, steps: usize) -> Result<DiffArray<S>> {
    if joints == 0 || steps == 0 {
        return Err(Error::format("adjacency", "joints and steps must be >= 1"));
    }
    let mut m = vec![S::zero(); joints * joints];
    for i in 0..joints {
        m[i * joints + i] = S::one();
    }
    for &(a, b) in bones {
        if a >= joints || b >= joints {
            return Err(Error::format("adjacency", format!("bone ({a}, {b}) out of range for {joints} joints")));
        }
        m[a * joints + b] = S::one();
        m[b * joints + a] = S::one();
    }
    let data = (0..steps).flat_map(|_| m.iter().copied()).collect();
    DiffArray::new(vec![steps, joints, joints], data)
}

/// Splits absolute poses into torso-relative poses and the torso path.
///
/// [`uncenter`] inverts this bit-exactly whenever coordinates lie on a common
/// dyadic grid well inside the mantissa range, which the synthetic generator
/// guarantees; otherwise the round trip is exact to within one ulp.
pub fn center_on_torso(frames: &[Vec<Vec3>], path_joint: usize) -> (Vec<Vec<Vec3>>, Vec<Vec3>) {
    let path: Vec<Vec3> = frames.iter().map(|f| f[path_joint]).collect();
    let centered = frames
        .iter()
        .zip(&path)
        .map(|(f, c)| f.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect())
        .collect();
    (centered, path)
}

/// Inverse of [`center_on_torso`].
pub fn uncenter(centered: &[Vec<Vec3>], path: &[Vec3]) -> Vec<Vec<Vec3>> {
    centered
        .iter()
        .zip(path)
        .map(|(f, c)| f.iter().map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]]).collect())
        .collect()
}

/// One observation/prediction window cut from a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Observed 2D joints, `T x J`.
    pub obs_p2d: Vec<Vec<Vec2>>,
    /// Future poses centered on the torso, `T̃ x J x 3`.
    pub target: Vec<Vec<Vec3>>,
    /// Absolute torso trajectory over the future, `T̃ x 3`.
    pub target_path: Vec<Vec3>,
    /// Torso position at the last observed frame; the model predicts relative to it.
    pub anchor: Vec3,
    pub obs_images: Vec<Option<String>>,
    pub bones: Vec<(usize, usize)>,
    pub path_joint: usize,
    /// Index of the first observed frame in the source sequence.
    pub start: usize,
}

impl Sample {
    pub fn obs_len(&self) -> usize {
        self.obs_p2d.len()
    }

    pub fn pred_len(&self) -> usize {
        self.target.len()
    }

    pub fn joints(&self) -> usize {
        self.target.first().map_or(0, Vec::len)
    }

    /// Absolute future poses.
    pub fn absolute_target(&self) -> Vec<Vec<Vec3>> {
        uncenter(&self.target, &self.target_path)
    }

    /// Regression target in the model frame (absolute minus anchor), flattened `T̃*J*3`.
    pub fn model_target(&self) -> Vec<f64> {
        let a = self.anchor;
        self.target
            .iter()
            .zip(&self.target_path)
            .flat_map(|(f, c)| f.iter().flat_map(move |p| (0..3).map(move |k| p[k] + c[k] - a[k])))
            .collect()
    }

    /// Observed spatio-temporal graph with normalized 2D vertices.
    pub fn obs_graph<S: Scalar>(&self, norm: &Normalization) -> Result<SpatioTemporalGraph<S>> {
        let (t, j) = (self.obs_len(), self.obs_p2d[0].len());
        let origin = self.obs_p2d[t - 1][self.path_joint];
        let data: Vec<S> = self
            .obs_p2d
            .iter()
            .flat_map(|f| f.iter().flat_map(|p| (0..2).map(|k| S::from_f64((p[k] - origin[k]) / norm.scale[k]))))
            .collect();
        let vertices = DiffArray::new(vec![t, j, 2], data)?;
        SpatioTemporalGraph::from_bones(vertices, self.bones.clone())
    }
}

/// Cuts windows `[k*stride, k*stride + T + T̃)` that fit entirely inside the sequence.
pub fn window_samples(seq: &SkeletonSequence, obs_len: usize, pred_len: usize, stride: usize) -> Result<Vec<Sample>> {
    if stride == 0 {
        return Err(Error::param("window stride must be >= 1"));
    }
    if obs_len == 0 || pred_len == 0 {
        return Err(Error::param("obs and pred lengths must be >= 1"));
    }
    let span = obs_len + pred_len;
    if seq.len() < span {
        return Ok(Vec::new());
    }
    let count = (seq.len() - span) / stride + 1;
    Ok((0..count).map(|k| cut(seq, k * stride, obs_len, pred_len)).collect())
}

fn cut(seq: &SkeletonSequence, s: usize, obs_len: usize, pred_len: usize) -> Sample {
    let pj = seq.path_joint;
    let obs = &seq.frames[s..s + obs_len];
    let fut: Vec<Vec<Vec3>> = seq.frames[s + obs_len..s + obs_len + pred_len].iter().map(|f| f.p3d.clone()).collect();
    let (target, target_path) = center_on_torso(&fut, pj);
    Sample {
        obs_p2d: obs.iter().map(|f| f.p2d.clone()).collect(),
        target,
        target_path,
        anchor: obs[obs_len - 1].p3d[pj],
        obs_images: obs.iter().map(|f| f.image.clone()).collect(),
        bones: seq.bones.clone(),
        path_joint: pj,
        start: s,
    }
}

/// The window observing `[start, start + T)`. When the sequence ends before the
/// future does, the future fields are zero-filled.
pub fn observation_sample(seq: &SkeletonSequence, start: usize, obs_len: usize, pred_len: usize) -> Result<Sample> {
    if obs_len == 0 || pred_len == 0 {
        return Err(Error::param("obs and pred lengths must be >= 1"));
    }
    if start + obs_len > seq.len() {
        return Err(Error::input(format!(
            "observation window [{start}, {}) needs {obs_len} frames but the sequence has {}",
            start + obs_len,
            seq.len()
        )));
    }
    if start + obs_len + pred_len <= seq.len() {
        return Ok(cut(seq, start, obs_len, pred_len));
    }
    let obs = &seq.frames[start..start + obs_len];
    Ok(Sample {
        obs_p2d: obs.iter().map(|f| f.p2d.clone()).collect(),
        target: vec![vec![[0.0; 3]; seq.joints]; pred_len],
        target_path: vec![[0.0; 3]; pred_len],
        anchor: obs[obs_len - 1].p3d[seq.path_joint],
        obs_images: obs.iter().map(|f| f.image.clone()).collect(),
        bones: seq.bones.clone(),
        path_joint: seq.path_joint,
        start,
    })
}

/// Per-axis scale mapping observation-window 2D coordinates (relative to the
/// last observed torso) into `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: [f64; 2],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { scale: [1.0, 1.0] }
    }
}

impl Normalization {
    pub fn fit(samples: &[Sample]) -> Self {
        let mut scale = [0.0f64; 2];
        for s in samples {
            let origin = s.obs_p2d[s.obs_len() - 1][s.path_joint];
            for p in s.obs_p2d.iter().flatten() {
                for k in 0..2 {
                    scale[k] = scale[k].max((p[k] - origin[k]).abs());
                }
            }
        }
        for v in &mut scale {
            if !(*v > 1e-12) {
                *v = 1.0;
            }
        }
        Self { scale }
    }
}
