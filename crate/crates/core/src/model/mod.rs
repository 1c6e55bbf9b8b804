//! The skeleton-graph forecasting network.

mod config;
mod export;
mod graph;
mod network;
mod params;

use serde::{Deserialize, Serialize};

pub use config::{ModelConfig, VisionMode, MIN_IMAGE_SIZE, VISION_CHANNELS, VISION_PLAN};
pub use export::{adjacency_to_csv, parse_adjacency_csv};
pub use graph::SpatioTemporalGraph;
pub use network::{fuse, ConvLayer, ForwardOutput, ModelInput, Phase, SkeletonGraph};
pub use params::{BnStats, ModelParams, PRELU_INIT};

/// One predicted future: model-frame poses and the absolute torso path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosePrediction {
    /// `[T̃][J][x,y,z]` relative to `offset`, meters.
    pub poses: Vec<Vec<[f64; 3]>>,
    /// `[T̃][x,y,z]` absolute torso trajectory, meters.
    pub path: Vec<[f64; 3]>,
    /// Absolute position the model frame is anchored at.
    pub offset: [f64; 3],
    pub path_joint: usize,
}

impl PosePrediction {
    /// Builds a prediction from one sample's `[T̃, J, 3]` model output.
    pub fn from_output(output: &[f64], pred_len: usize, joints: usize, path_joint: usize, offset: [f64; 3]) -> Self {
        assert_eq!(output.len(), pred_len * joints * 3);
        let poses: Vec<Vec<[f64; 3]>> = output
            .chunks(joints * 3)
            .map(|frame| frame.chunks(3).map(|p| [p[0], p[1], p[2]]).collect())
            .collect();
        let path = poses
            .iter()
            .map(|f: &Vec<[f64; 3]>| {
                let p = f[path_joint];
                [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]]
            })
            .collect();
        Self {
            poses,
            path,
            offset,
            path_joint,
        }
    }

    /// Poses in the absolute (camera) frame.
    pub fn absolute_poses(&self) -> Vec<Vec<[f64; 3]>> {
        self.poses
            .iter()
            .map(|f| {
                f.iter()
                    .map(|p| [p[0] + self.offset[0], p[1] + self.offset[1], p[2] + self.offset[2]])
                    .collect()
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.poses.iter().flatten().flatten().all(|v| v.is_finite())
            && self.path.iter().flatten().all(|v| v.is_finite())
    }
}
