use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;
use skelgraph::data::{
    load_sequence, observation_sample, render_sequence_images, save_sequence, synthesize, window_samples, PredictedWindow,
    PredictionDocument, Sample, SynthConfig,
};
use skelgraph::fsutil::write_atomic;
use skelgraph::metrics::{self, MetricsReport};
use skelgraph::model::{adjacency_to_csv, ModelConfig, ModelInput, SkeletonGraph};
use skelgraph::trainer::{self, AnyCheckpoint, Checkpoint, EpochRecord, TrainConfig};
use skelgraph::{Error, Precision, Scalar};

use crate::cli::{Cli, Command, EvalArgs, ExportArgs, PlotArgs, PredictArgs, SynthArgs, TrainArgs};
use crate::dataset::Dataset;
use crate::svg;

/// Optional per-command sections of the `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    synth: Option<SynthConfig>,
    train: Option<TrainConfig>,
}

fn read_config(path: Option<&Path>) -> Result<(ConfigFile, serde_json::Value)> {
    let Some(path) = path else {
        return Ok((ConfigFile::default(), serde_json::Value::Null));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let format_err = |e: serde_json::Error| Error::Format {
        context: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(format_err)?;
    let parsed: ConfigFile = serde_json::from_value(raw.clone()).map_err(format_err)?;
    Ok((parsed, raw))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn run(cli: Cli) -> Result<()> {
    let (config, raw) = read_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(args) => synth(args, config, cli.seed),
        Command::Train(args) => train(args, config, &raw, cli.seed),
        Command::Eval(args) => eval(args),
        Command::Predict(args) => predict(args, config),
        Command::Plot(args) => plot(args),
        Command::ExportAdjacency(args) => export_adjacency(args),
    }
}

fn synth(args: SynthArgs, config: ConfigFile, seed: Option<u64>) -> Result<()> {
    let mut cfg = config.synth.unwrap_or_default();
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = args.$flag { cfg.$field = v; })* };
    }
    set!(n => n_sequences, length => length, joints => joints, fps => fps, motion => motion, noise => noise_2d);
    if let Some(s) = seed {
        cfg.seed = s;
    }
    log::info!("effective synth config: {}", serde_json::to_string(&cfg)?);
    let sequences = synthesize(&cfg);
    for (i, mut seq) in sequences.into_iter().enumerate() {
        let name = format!("seq_{i:03}");
        if args.images {
            render_sequence_images(&mut seq, &args.out, &format!("images/{name}"), args.image_size)?;
        }
        save_sequence(&seq, args.out.join(format!("{name}.json")))?;
    }
    log::info!("wrote {} sequences to {}", cfg.n_sequences, args.out.display());
    Ok(())
}

fn train(args: TrainArgs, config: ConfigFile, raw: &serde_json::Value, seed: Option<u64>) -> Result<()> {
    let data = Dataset::load(&args.data)?;
    let mut cfg = config.train.unwrap_or_default();
    macro_rules! set {
        ($src:expr; $($flag:ident => $($field:ident).+),*) => { $(if let Some(v) = $src.$flag { cfg.$($field).+ = v; })* };
    }
    set!(args; epochs => epochs, lr => lr0, decay_factor => decay_factor, decay_every => decay_every,
        batch_size => batch_size, momentum => momentum, lambda1 => loss_weights.lambda1,
        lambda2 => loss_weights.lambda2, checkpoint_every => checkpoint_every, eval_every => eval_every,
        stride => train_stride, precision => precision);
    set!(args.model; obs_len => model.obs_len, pred_len => model.pred_len, n_spgcnn => model.n_spgcnn,
        n_txcnn => model.n_txcnn, vision => model.vision);
    if args.clip_norm.is_some() {
        cfg.clip_norm = args.clip_norm;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(j) = data.joints() {
        let pinned = raw.pointer("/train/model/joints").and_then(|v| v.as_u64());
        if let Some(p) = pinned.filter(|&p| p as usize != j) {
            return Err(Error::Dimension(format!("config sets {p} joints but the data has {j}")).into());
        }
        cfg.model.joints = j;
    }
    cfg.checkpoint_dir = Some(args.out.clone());
    cfg.validate()?;
    log::info!("effective train config: {}", serde_json::to_string(&cfg)?);

    let samples = data.samples(cfg.model.obs_len, cfg.model.pred_len, cfg.train_stride)?;
    let fps = data.fps()?;
    let eval_samples = match &args.eval_data {
        Some(p) => Dataset::load(p)?.samples(cfg.model.obs_len, cfg.model.pred_len, cfg.eval_stride())?,
        None => Vec::new(),
    };
    log::info!("{} training windows, {} held-out windows", samples.len(), eval_samples.len());
    write_atomic(args.out.join("config.json"), to_json(&cfg).as_bytes())?;

    let history_path = args.out.join("history.jsonl");
    let mut history = String::new();
    let mut on_epoch = |r: &EpochRecord| {
        history.push_str(&serde_json::to_string(r).expect("serializable"));
        history.push('\n');
        if let Err(e) = write_atomic(&history_path, history.as_bytes()) {
            log::warn!("could not write history: {e}");
        }
        match &r.eval {
            Some(m) => log::info!("epoch {} lr {:.3e} loss {:.6e} ade {:.2} mm fde {:.2} mm", r.epoch, r.lr, r.loss, m.ade, m.fde),
            None => log::info!("epoch {} lr {:.3e} loss {:.6e}", r.epoch, r.lr, r.loss),
        }
    };
    match cfg.precision {
        Precision::F32 => trainer::train::<f32>(&cfg, &samples, &eval_samples, fps, &mut on_epoch).map(|_| ()),
        Precision::F64 => trainer::train::<f64>(&cfg, &samples, &eval_samples, fps, &mut on_epoch).map(|_| ()),
    }
    .context("training failed")?;
    log::info!("wrote {}", args.out.join(trainer::FINAL_CHECKPOINT).display());
    Ok(())
}

fn emit_report(report: &MetricsReport, out: Option<&Path>) -> Result<()> {
    let json = to_json(report);
    if let Some(p) = out {
        write_atomic(p, json.as_bytes())?;
    }
    print!("{json}");
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    if let (Some(pred), Some(gt)) = (&args.pred, &args.gt) {
        let report = score_prediction(pred, gt)?;
        return emit_report(&report, args.out.as_deref());
    }
    let (Some(ckpt), Some(data)) = (&args.ckpt, &args.data) else {
        return Err(Error::Usage("eval needs either --ckpt and --data, or --pred and --gt".into()).into());
    };
    let data = Dataset::load(data)?;
    let report = match AnyCheckpoint::load(ckpt)? {
        AnyCheckpoint::F32(c) => eval_checkpoint(&c, &data, args.stride)?,
        AnyCheckpoint::F64(c) => eval_checkpoint(&c, &data, args.stride)?,
    };
    emit_report(&report, args.out.as_deref())
}

fn eval_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, data: &Dataset, stride: Option<usize>) -> Result<MetricsReport> {
    let model = SkeletonGraph::new(ckpt.config.model.clone())?;
    let m = model.config();
    check_joints(data.joints(), m.joints)?;
    let samples = data.samples(m.obs_len, m.pred_len, stride.unwrap_or(ckpt.config.eval_stride()))?;
    log::info!("evaluating {} windows", samples.len());
    Ok(trainer::evaluate(&model, &ckpt.state, &ckpt.normalization, &samples, data.fps()?, Path::new(""))?)
}

fn check_joints(data: Option<usize>, model: usize) -> Result<()> {
    match data {
        Some(j) if j != model => Err(Error::Dimension(format!("data has {j} joints, model expects {model}")).into()),
        _ => Ok(()),
    }
}

/// Ground-truth windows matching a prediction document.
fn matching_windows(doc: &PredictionDocument, gt_path: &Path) -> Result<Vec<(Sample, PredictedWindow)>> {
    let gt = load_sequence(gt_path)?;
    if gt.joints != doc.joints {
        return Err(Error::Dimension(format!("prediction has {} joints, ground truth {}", doc.joints, gt.joints)).into());
    }
    doc.windows
        .iter()
        .map(|w| {
            if w.start + doc.obs_len + doc.pred_len > gt.len() {
                return Err(Error::Input(format!(
                    "window at frame {} runs past the end of {} ({} frames)",
                    w.start,
                    gt_path.display(),
                    gt.len()
                ))
                .into());
            }
            Ok((observation_sample(&gt, w.start, doc.obs_len, doc.pred_len)?, w.clone()))
        })
        .collect()
}

fn score_prediction(pred: &Path, gt: &Path) -> Result<MetricsReport> {
    let doc = PredictionDocument::load(pred)?;
    let pairs = matching_windows(&doc, gt)?;
    let reports = pairs
        .iter()
        .map(|(s, w)| metrics::report(&s.absolute_target(), &w.poses(), doc.path_joint, doc.fps))
        .collect::<skelgraph::Result<Vec<_>>>()?;
    Ok(MetricsReport::average(&reports)?)
}

/// Window starts `k * stride` with a full future inside the sequence, or the final
/// observation window when none fits.
fn window_starts(len: usize, obs_len: usize, pred_len: usize, stride: usize) -> Result<Vec<usize>> {
    if len < obs_len {
        return Err(Error::Input(format!("sequence has {len} frames, fewer than the {obs_len} observed steps")).into());
    }
    if stride == 0 {
        return Err(Error::Parameter("stride must be >= 1".into()).into());
    }
    if len < obs_len + pred_len {
        return Ok(vec![len - obs_len]);
    }
    Ok((0..=(len - obs_len - pred_len) / stride).map(|k| k * stride).collect())
}

fn predict(args: PredictArgs, config: ConfigFile) -> Result<()> {
    let seq = load_sequence(&args.input)?;
    let doc = if args.copy_gt {
        let model = config.train.map(|t| t.model).unwrap_or_default();
        let (t, tp) = (args.obs_len.unwrap_or(model.obs_len), args.pred_len.unwrap_or(model.pred_len));
        let samples = window_samples(&seq, t, tp, args.stride.unwrap_or(tp))?;
        if samples.is_empty() {
            return Err(Error::Input(format!("sequence has {} frames, fewer than the {} a window needs", seq.len(), t + tp)).into());
        }
        PredictionDocument::new(&seq, t, tp, samples.iter().map(PredictedWindow::from_ground_truth).collect())
    } else {
        let path = args.ckpt.as_deref().expect("clap requires --ckpt without --copy-gt");
        let root = args.input.parent().unwrap_or(Path::new(".")).to_path_buf();
        match AnyCheckpoint::load(path)? {
            AnyCheckpoint::F32(c) => predict_with(&c, &seq, &args, &root)?,
            AnyCheckpoint::F64(c) => predict_with(&c, &seq, &args, &root)?,
        }
    };
    doc.save(&args.out)?;
    log::info!("wrote {} predicted windows to {}", doc.windows.len(), args.out.display());
    Ok(())
}

fn model_for<S: Scalar>(ckpt: &Checkpoint<S>, vision: Option<skelgraph::model::VisionMode>, joints: usize) -> Result<SkeletonGraph> {
    let mut expected: ModelConfig = ckpt.config.model.clone();
    if let Some(v) = vision {
        expected.vision = v;
    }
    ckpt.check_model(&expected)?;
    check_joints(Some(joints), expected.joints)?;
    Ok(SkeletonGraph::new(expected)?)
}

fn predict_with<S: Scalar>(
    ckpt: &Checkpoint<S>,
    seq: &skelgraph::data::SkeletonSequence,
    args: &PredictArgs,
    root: &Path,
) -> Result<PredictionDocument> {
    let model = model_for(ckpt, args.vision, seq.joints)?;
    let m = model.config().clone();
    let starts = window_starts(seq.len(), m.obs_len, m.pred_len, args.stride.unwrap_or(m.pred_len))?;
    let samples = starts
        .iter()
        .map(|&s| observation_sample(seq, s, m.obs_len, m.pred_len))
        .collect::<skelgraph::Result<Vec<_>>>()?;
    let predictions = trainer::predict(&model, &ckpt.state, &ckpt.normalization, &samples, root)?;
    let windows = samples
        .iter()
        .zip(&predictions)
        .map(|(s, p)| PredictedWindow::from_prediction(s.start, p))
        .collect();
    Ok(PredictionDocument::new(seq, m.obs_len, m.pred_len, windows))
}

fn plot(args: PlotArgs) -> Result<()> {
    let doc = PredictionDocument::load(&args.pred)?;
    let pairs = matching_windows(&doc, &args.gt)?;
    let (sample, window) = pairs.get(args.window).ok_or_else(|| {
        Error::Usage(format!("window {} requested but the prediction has {}", args.window, pairs.len()))
    })?;
    let truth = sample.absolute_target();
    let predicted = window.poses();
    let frames = if args.frames.is_empty() {
        let mut f = vec![0, doc.pred_len / 2, doc.pred_len - 1];
        f.dedup();
        f
    } else {
        args.frames.clone()
    };
    let bones: Vec<(usize, usize)> = doc.bones.iter().map(|b| (b[0], b[1])).collect();
    let frame_view = svg::View::fit(truth.iter().chain(&predicted).flatten());
    for &k in &frames {
        if k >= doc.pred_len {
            return Err(Error::Usage(format!("frame {k} outside the {}-frame horizon", doc.pred_len)).into());
        }
        let text = svg::skeleton_overlay(&frame_view, &bones, &truth[k], &predicted[k], &format!("future frame {k}"));
        write_atomic(args.out.join(format!("frame_{k:03}.svg")), text.as_bytes())?;
    }
    let pose = metrics::mpjpe_curve(
        &metrics::torso_centered(&truth, doc.path_joint),
        &metrics::torso_centered(&predicted, doc.path_joint),
        metrics::JointSet::All,
    )?;
    let path = metrics::mpjpe_curve(&truth, &predicted, metrics::JointSet::Single(doc.path_joint))?;
    let text = svg::error_curves(&[("pose", &pose), ("path", &path)], doc.fps);
    write_atomic(args.out.join("mpjpe.svg"), text.as_bytes())?;
    log::info!("wrote {} skeleton plots and mpjpe.svg to {}", frames.len(), args.out.display());
    Ok(())
}

fn export_adjacency(args: ExportArgs) -> Result<()> {
    let seq = load_sequence(&args.input)?;
    let root: PathBuf = args.input.parent().unwrap_or(Path::new(".")).to_path_buf();
    let csv = match AnyCheckpoint::load(&args.ckpt)? {
        AnyCheckpoint::F32(c) => learned_adjacency(&c, &seq, args.start, &root)?,
        AnyCheckpoint::F64(c) => learned_adjacency(&c, &seq, args.start, &root)?,
    };
    write_atomic(&args.out, csv.as_bytes())?;
    log::info!("wrote {}", args.out.display());
    Ok(())
}

fn learned_adjacency<S: Scalar>(
    ckpt: &Checkpoint<S>,
    seq: &skelgraph::data::SkeletonSequence,
    start: usize,
    root: &Path,
) -> Result<String> {
    let model = model_for(ckpt, None, seq.joints)?;
    let m = model.config();
    let sample = observation_sample(seq, start, m.obs_len, m.pred_len)?;
    let prepared = trainer::prepare::<S>(&model, std::slice::from_ref(&sample), &ckpt.normalization, root)?;
    let p = &prepared[0];
    let images: Option<Vec<_>> = p.images.as_ref().map(|i| vec![i]);
    let input = ModelInput::stack(&[&p.graph], images.as_deref())?;
    let (_, adjacency) = model.infer(&ckpt.state, &input)?;
    Ok(adjacency_to_csv(&adjacency)?)
}
