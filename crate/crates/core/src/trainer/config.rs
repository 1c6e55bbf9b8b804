use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{CosinePairs, LossWeights};
use crate::model::ModelConfig;
use crate::scalar::Precision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub cosine_pairs: CosinePairs,
    pub model: ModelConfig,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Write an intermediate checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    /// Evaluate on the held-out samples every this many epochs (0 = never).
    pub eval_every: usize,
    pub precision: Precision,
    pub train_stride: usize,
    /// Evaluation window stride; defaults to the prediction length.
    pub eval_stride: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            decay_factor: 0.2,
            decay_every: 200,
            epochs: 450,
            batch_size: 128,
            seed: 0,
            loss_weights: LossWeights::default(),
            cosine_pairs: CosinePairs::Consecutive,
            model: ModelConfig::default(),
            momentum: 0.0,
            clip_norm: None,
            checkpoint_every: 0,
            eval_every: 0,
            precision: Precision::F32,
            train_stride: 1,
            eval_stride: None,
            data_dir: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss_weights.validate()?;
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::param(format!("lr0 must be finite and >= 0, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::param(format!("decay_factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_every == 0 {
            return Err(Error::param("decay_every must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        if self.train_stride == 0 || self.eval_stride == Some(0) {
            return Err(Error::param("window strides must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::param(format!("clip_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    pub fn eval_stride(&self) -> usize {
        self.eval_stride.unwrap_or(self.model.pred_len)
    }

    /// `lr0 * decay_factor^floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self)
    }
}

pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let steps = (epoch / config.decay_every.max(1)) as i32;
    config.lr0 * config.decay_factor.powi(steps)
}
