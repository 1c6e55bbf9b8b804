use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel count produced by the image feature extractor.
pub const VISION_CHANNELS: usize = 21;
/// Output channels of the six extractor convolutions.
pub const VISION_PLAN: [usize; 6] = [6, 9, 12, 15, 18, 21];
/// Smallest accepted image side; five stride-2 stages leave a 2x2 map.
pub const MIN_IMAGE_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisionMode {
    #[default]
    None,
    /// Only the last observed frame (3 channels).
    LastImage,
    /// Every observed frame stacked on the channel axis (3T channels).
    Sequence,
}

impl std::str::FromStr for VisionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(VisionMode::None),
            "last" | "last_image" => Ok(VisionMode::LastImage),
            "sequence" | "seq" => Ok(VisionMode::Sequence),
            other => Err(format!("unknown vision mode `{other}` (none, last, sequence)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Observed steps T.
    pub obs_len: usize,
    /// Predicted steps T̃.
    pub pred_len: usize,
    pub joints: usize,
    /// Per-joint feature width F of the graph embedding.
    pub features: usize,
    pub n_spgcnn: usize,
    pub n_txcnn: usize,
    pub vision: VisionMode,
    /// Side length images are resized to before feature extraction.
    pub image_size: usize,
    /// Learn Ã from A with a small CNN; otherwise Ã = A.
    pub learn_adjacency: bool,
    /// Symmetric degree normalization of the input adjacency.
    pub normalize_adjacency: bool,
    pub batch_norm: bool,
    pub txcnn_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            obs_len: 30,
            pred_len: 60,
            joints: 21,
            features: 3,
            n_spgcnn: 1,
            n_txcnn: 11,
            vision: VisionMode::None,
            image_size: 128,
            learn_adjacency: true,
            normalize_adjacency: false,
            batch_norm: true,
            txcnn_residual: true,
        }
    }
}

impl ModelConfig {
    /// Image channels C concatenated to the graph embedding (0 without vision).
    pub fn vision_channels(&self) -> usize {
        match self.vision {
            VisionMode::None => 0,
            _ => VISION_CHANNELS,
        }
    }

    /// Channels of the raw image tensor fed to the extractor.
    pub fn image_input_channels(&self) -> usize {
        match self.vision {
            VisionMode::None => 0,
            VisionMode::LastImage => 3,
            VisionMode::Sequence => 3 * self.obs_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::param(m));
        if self.obs_len < 1 || self.pred_len < 1 {
            return fail(format!("obs_len and pred_len must be >= 1 (got {}, {})", self.obs_len, self.pred_len));
        }
        if self.joints < 2 {
            return fail(format!("joints must be >= 2, got {}", self.joints));
        }
        if self.features < 1 {
            return fail("features must be >= 1".into());
        }
        if self.n_spgcnn < 1 {
            return fail(format!("n_spgcnn must be >= 1, got {}", self.n_spgcnn));
        }
        if self.n_txcnn < 3 {
            return fail(format!("n_txcnn must be >= 3, got {}", self.n_txcnn));
        }
        if self.vision != VisionMode::None && self.image_size < MIN_IMAGE_SIZE {
            return fail(format!("image_size must be >= {MIN_IMAGE_SIZE}, got {}", self.image_size));
        }
        Ok(())
    }
}
