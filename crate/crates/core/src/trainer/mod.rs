//! Training and evaluation harness: SGD with step decay over seeded mini-batches,
//! checkpointing, and aggregated metric reports.

mod checkpoint;
mod config;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{sample_image_tensor, Normalization, Sample};
use crate::diffarray::{DiffArray, Sgd, Tape};
use crate::error::{Error, Result};
use crate::losses::total_loss;
use crate::metrics::{self, MetricsReport};
use crate::model::{ModelInput, ModelParams, Phase, PosePrediction, SkeletonGraph, SpatioTemporalGraph};
use crate::scalar::Scalar;

pub use checkpoint::{AnyCheckpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{lr_at, TrainConfig};

/// File name of the checkpoint written at the end of training.
pub const FINAL_CHECKPOINT: &str = "final";

/// Batch size used for eval-mode forwards.
const EVAL_BATCH: usize = 32;

/// Name of the intermediate checkpoint written after `epoch` completed epochs.
pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:05}")
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean of the batch losses.
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<MetricsReport>,
}

/// SHA-256 of a sample's numeric content; fixes the pre-shuffle order.
pub fn sample_digest(sample: &Sample) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in sample.obs_p2d.iter().flatten().flatten() {
        h.update(p.to_le_bytes());
    }
    for p in sample.absolute_target().iter().flatten().flatten() {
        h.update(p.to_le_bytes());
    }
    for (a, b) in &sample.bones {
        h.update((*a as u64).to_le_bytes());
        h.update((*b as u64).to_le_bytes());
    }
    h.update((sample.path_joint as u64).to_le_bytes());
    for im in &sample.obs_images {
        h.update(im.as_deref().unwrap_or("").as_bytes());
        h.update([0]);
    }
    h.finalize().into()
}

/// Samples sorted by content digest, so storage order cannot affect training.
pub fn canonical_order(samples: &[Sample]) -> Vec<Sample> {
    let mut keyed: Vec<([u8; 32], &Sample)> = samples.iter().map(|s| (sample_digest(s), s)).collect();
    keyed.sort_by_key(|k| k.0);
    keyed.into_iter().map(|(_, s)| s.clone()).collect()
}

/// A sample converted to model tensors.
#[derive(Debug, Clone)]
pub struct Prepared<S> {
    pub graph: SpatioTemporalGraph<S>,
    pub images: Option<DiffArray<S>>,
    /// Model-frame target, flattened `T̃*J*3`.
    pub target: Vec<S>,
}

fn check_sample(model: &SkeletonGraph, s: &Sample) -> Result<()> {
    let c = model.config();
    if s.obs_len() != c.obs_len || s.pred_len() != c.pred_len || s.joints() != c.joints {
        return Err(Error::dim(format!(
            "sample (T={}, T̃={}, J={}) does not match model (T={}, T̃={}, J={})",
            s.obs_len(),
            s.pred_len(),
            s.joints(),
            c.obs_len,
            c.pred_len,
            c.joints
        )));
    }
    Ok(())
}

pub fn prepare<S: Scalar>(model: &SkeletonGraph, samples: &[Sample], norm: &Normalization, base_dir: &Path) -> Result<Vec<Prepared<S>>> {
    let c = model.config();
    samples
        .iter()
        .map(|s| {
            check_sample(model, s)?;
            Ok(Prepared {
                graph: s.obs_graph(norm)?,
                images: sample_image_tensor(s, c.vision, c.image_size, base_dir)?,
                target: s.model_target().into_iter().map(S::from_f64).collect(),
            })
        })
        .collect()
}

fn batch_input<S: Scalar>(items: &[&Prepared<S>]) -> Result<ModelInput<S>> {
    let graphs: Vec<_> = items.iter().map(|p| &p.graph).collect();
    let images: Option<Vec<&DiffArray<S>>> = items.iter().map(|p| p.images.as_ref()).collect();
    ModelInput::stack(&graphs, images.as_deref())
}

fn batch_target<S: Scalar>(items: &[&Prepared<S>], pred_len: usize, joints: usize) -> Result<DiffArray<S>> {
    let data: Vec<S> = items.iter().flat_map(|p| p.target.iter().copied()).collect();
    DiffArray::new(vec![items.len(), pred_len, joints, 3], data)
}

/// Training state for one run.
pub struct Trainer<S: Scalar> {
    config: TrainConfig,
    model: SkeletonGraph,
    state: ModelParams<S>,
    normalization: Normalization,
    optimizer: Sgd<S>,
    rng: ChaCha8Rng,
    data: Vec<Prepared<S>>,
    pairs: Vec<(usize, usize)>,
    epoch: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: TrainConfig, samples: &[Sample]) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::input("no samples to train on"));
        }
        let model = SkeletonGraph::new(config.model.clone())?;
        let ordered = canonical_order(samples);
        let normalization = Normalization::fit(&ordered);
        let base = config.data_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        let data = prepare(&model, &ordered, &normalization, &base)?;
        let state = model.init_params::<S>(config.seed);
        let pairs = config.cosine_pairs.resolve(config.model.joints, &ordered[0].bones);
        Ok(Self {
            optimizer: Sgd::with_momentum(S::from_f64(config.momentum)),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4500),
            config,
            model,
            state,
            normalization,
            data,
            pairs,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &SkeletonGraph {
        &self.model
    }

    pub fn state(&self) -> &ModelParams<S> {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut ModelParams<S> {
        &mut self.state
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        let mut config = self.config.clone();
        config.data_dir = None;
        config.checkpoint_dir = None;
        Checkpoint {
            config,
            epoch: self.epoch,
            normalization: self.normalization,
            state: self.state.clone(),
        }
    }

    /// Train-mode loss of the given prepared samples, without touching any state.
    pub fn probe_loss(&self, indices: &[usize]) -> Result<f64> {
        let items: Vec<&Prepared<S>> = indices.iter().map(|&i| &self.data[i]).collect();
        let mut stats = self.state.stats.clone();
        let mut tape = Tape::new();
        let bind = self.state.params.bind(&mut tape);
        let loss = self.record_loss(&mut tape, &bind, Phase::Train(&mut stats), &items)?;
        Ok(tape.value(loss).item().as_f64())
    }

    fn record_loss(
        &self,
        tape: &mut Tape<S>,
        bind: &crate::diffarray::Bindings,
        phase: Phase<'_, S>,
        items: &[&Prepared<S>],
    ) -> Result<crate::diffarray::Var> {
        let c = self.model.config();
        let input = batch_input(items)?;
        let out = self.model.forward(tape, bind, phase, &input)?;
        let target = tape.constant(batch_target(items, c.pred_len, c.joints)?);
        total_loss(tape, target, out.poses, self.config.loss_weights, &self.pairs).map_err(|e| e.in_stage("loss"))
    }

    /// One SGD step on the given prepared samples; returns the batch loss before the update.
    pub fn step(&mut self, indices: &[usize], lr: f64) -> Result<f64> {
        let items: Vec<&Prepared<S>> = indices.iter().map(|&i| &self.data[i]).collect();
        let mut stats = self.state.stats.clone();
        let mut tape = Tape::new();
        let bind = self.state.params.bind(&mut tape);
        let loss = self.record_loss(&mut tape, &bind, Phase::Train(&mut stats), &items)?;
        let value = tape.value(loss).item().as_f64();
        tape.backward(loss)?;
        let params = &mut self.state.params;
        params.zero_grads();
        params.accumulate_grads(&tape, &bind);
        if let Some(max) = self.config.clip_norm {
            params.clip_grad_norm(max);
        }
        self.optimizer.step(params, S::from_f64(lr))?;
        params.zero_grads();
        if !params.is_finite() {
            return Err(Error::non_finite("sgd update"));
        }
        self.state.stats = stats;
        Ok(value)
    }

    /// Runs one epoch of shuffled mini-batches.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let loss = self
                .step(chunk, lr)
                .map_err(|e| e.in_stage(&format!("epoch {epoch} batch {b}")))?;
            total += loss * chunk.len() as f64;
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            lr,
            loss: total / self.data.len() as f64,
            eval: None,
        })
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub checkpoint: Checkpoint<S>,
    pub history: Vec<EpochRecord>,
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each one. When
/// `config.checkpoint_dir` is set, intermediate and final checkpoints are written
/// there; a failing epoch leaves previously written checkpoints untouched.
pub fn train<S: Scalar>(
    config: &TrainConfig,
    train_samples: &[Sample],
    eval_samples: &[Sample],
    fps: f64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<S>> {
    let mut trainer = Trainer::<S>::new(config.clone(), train_samples)?;
    let base = config.data_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut record = trainer.train_epoch()?;
        let done = trainer.epoch();
        let eval_due = config.eval_every > 0 && (done % config.eval_every == 0 || done == config.epochs);
        if eval_due && !eval_samples.is_empty() {
            record.eval = Some(evaluate(
                trainer.model(),
                trainer.state(),
                &trainer.normalization(),
                eval_samples,
                fps,
                &base,
            )?);
        }
        on_epoch(&record);
        history.push(record);
        if let Some(dir) = &config.checkpoint_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done != config.epochs {
                trainer.checkpoint().save(dir.join(epoch_checkpoint_name(done)))?;
            }
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = &config.checkpoint_dir {
        checkpoint.save(dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { checkpoint, history })
}

/// Eval-mode predictions for each sample.
pub fn predict<S: Scalar>(
    model: &SkeletonGraph,
    state: &ModelParams<S>,
    norm: &Normalization,
    samples: &[Sample],
    base_dir: &Path,
) -> Result<Vec<PosePrediction>> {
    let c = model.config();
    let prepared = prepare::<S>(model, samples, norm, base_dir)?;
    let mut out = Vec::with_capacity(samples.len());
    for (chunk, src) in prepared.chunks(EVAL_BATCH).zip(samples.chunks(EVAL_BATCH)) {
        let items: Vec<&Prepared<S>> = chunk.iter().collect();
        let (poses, _) = model.infer(state, &batch_input(&items)?)?;
        let per = c.pred_len * c.joints * 3;
        for (k, s) in src.iter().enumerate() {
            let flat: Vec<f64> = poses.data()[k * per..(k + 1) * per].iter().map(|v| v.as_f64()).collect();
            out.push(PosePrediction::from_output(&flat, c.pred_len, c.joints, s.path_joint, s.anchor));
        }
    }
    Ok(out)
}

/// Per-sample reports of `predictions` against the samples' ground truth, averaged.
pub fn evaluate_predictions(samples: &[Sample], predictions: &[PosePrediction], fps: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::input("no samples to evaluate"));
    }
    if samples.len() != predictions.len() {
        return Err(Error::usage(format!(
            "{} samples but {} predictions",
            samples.len(),
            predictions.len()
        )));
    }
    let reports = samples
        .iter()
        .zip(predictions)
        .map(|(s, p)| metrics::report(&s.absolute_target(), &p.absolute_poses(), s.path_joint, fps))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::average(&reports)
}

/// Eval-mode metrics of the model over `samples`.
pub fn evaluate<S: Scalar>(
    model: &SkeletonGraph,
    state: &ModelParams<S>,
    norm: &Normalization,
    samples: &[Sample],
    fps: f64,
    base_dir: &Path,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::input("no samples to evaluate"));
    }
    let predictions = predict(model, state, norm, samples, base_dir)?;
    evaluate_predictions(samples, &predictions, fps)
}

/// A prediction that reproduces the sample's ground truth.
pub fn ground_truth_prediction(sample: &Sample) -> PosePrediction {
    let flat: Vec<f64> = sample.model_target();
    PosePrediction::from_output(&flat, sample.pred_len(), sample.joints(), sample.path_joint, sample.anchor)
}
