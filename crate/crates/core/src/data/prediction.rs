//! Prediction documents: model forecasts for windows of a skeleton sequence.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Sample, SkeletonSequence, Vec3};
use crate::error::{Error, Result};
use crate::model::PosePrediction;

pub const PREDICTION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedFrame {
    /// Absolute joint positions, meters.
    pub p3d: Vec<Vec3>,
}

/// Forecast for one observation window starting at `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedWindow {
    pub start: usize,
    pub frames: Vec<PredictedFrame>,
    /// Absolute torso trajectory, meters.
    pub path: Vec<Vec3>,
}

impl PredictedWindow {
    pub fn from_prediction(start: usize, p: &PosePrediction) -> Self {
        Self {
            start,
            frames: p.absolute_poses().into_iter().map(|p3d| PredictedFrame { p3d }).collect(),
            path: p.path.clone(),
        }
    }

    /// The sample's own future, as if predicted perfectly.
    pub fn from_ground_truth(sample: &Sample) -> Self {
        Self {
            start: sample.start,
            frames: sample.absolute_target().into_iter().map(|p3d| PredictedFrame { p3d }).collect(),
            path: sample.target_path.clone(),
        }
    }

    pub fn poses(&self) -> Vec<Vec<Vec3>> {
        self.frames.iter().map(|f| f.p3d.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionDocument {
    pub version: u32,
    pub joints: usize,
    pub fps: f64,
    pub bones: Vec<[usize; 2]>,
    pub path_joint: usize,
    pub obs_len: usize,
    pub pred_len: usize,
    pub windows: Vec<PredictedWindow>,
}

impl PredictionDocument {
    pub fn new(seq: &SkeletonSequence, obs_len: usize, pred_len: usize, windows: Vec<PredictedWindow>) -> Self {
        Self {
            version: PREDICTION_VERSION,
            joints: seq.joints,
            fps: seq.fps,
            bones: seq.bones.iter().map(|&(a, b)| [a, b]).collect(),
            path_joint: seq.path_joint,
            obs_len,
            pred_len,
            windows,
        }
    }

    pub fn validate(&self, origin: &str) -> Result<()> {
        let bad = |m: String| Err(Error::format(origin, m));
        if self.version != PREDICTION_VERSION {
            return bad(format!("unsupported prediction version {}", self.version));
        }
        if self.path_joint >= self.joints {
            return bad(format!("path_joint {} out of range for {} joints", self.path_joint, self.joints));
        }
        for (k, w) in self.windows.iter().enumerate() {
            if w.frames.len() != self.pred_len || w.path.len() != self.pred_len {
                return bad(format!("window {k}: expected {} frames", self.pred_len));
            }
            if w.frames.iter().any(|f| f.p3d.len() != self.joints) {
                return bad(format!("window {k}: frame with wrong joint count"));
            }
            if w.frames.iter().flat_map(|f| f.p3d.iter().flatten()).chain(w.path.iter().flatten()).any(|v| !v.is_finite()) {
                return bad(format!("window {k}: non-finite coordinate"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::format("prediction", e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Self = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{origin}:{}:{}", e.line(), e.column()), e.to_string()))?;
        doc.validate(&origin)?;
        Ok(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::fsutil::write_atomic(path, self.to_json()?.as_bytes())
    }
}
