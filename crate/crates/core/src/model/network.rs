use crate::diffarray::{Bindings, DiffArray, NormConfig, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::config::{ModelConfig, VisionMode, MIN_IMAGE_SIZE, VISION_PLAN};
use super::params::{BnStats, ModelParams};
use super::SpatioTemporalGraph;

/// One convolution with optional batch norm and PReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub bn: bool,
    pub act: bool,
}

impl ConvLayer {
    fn new(prefix: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, bn: bool, act: bool) -> Self {
        Self {
            prefix: prefix.into(),
            cin,
            cout,
            k,
            stride,
            bn,
            act,
        }
    }

    fn padding(&self) -> usize {
        self.k / 2
    }
}

/// Whether batch norm uses batch statistics (and updates the running ones) or frozen ones.
pub enum Phase<'a, S> {
    Train(&'a mut BnStats<S>),
    Eval(&'a BnStats<S>),
}

/// A batch of model inputs with an explicit leading batch axis.
#[derive(Debug, Clone)]
pub struct ModelInput<S> {
    /// `[N, T, J, 2]`
    pub vertices: DiffArray<S>,
    /// `[N, T, J, J]`
    pub adjacency: DiffArray<S>,
    /// `[N, 3 or 3T, H, W]`
    pub images: Option<DiffArray<S>>,
}

impl<S: Scalar> ModelInput<S> {
    /// Stacks graphs (and per-graph image tensors `[C, H, W]`) into one batch.
    pub fn stack(graphs: &[&SpatioTemporalGraph<S>], images: Option<&[&DiffArray<S>]>) -> Result<Self> {
        let first = graphs.first().ok_or_else(|| Error::usage("empty batch"))?;
        let (t, j) = (first.steps(), first.joints());
        let mut verts = Vec::with_capacity(graphs.len() * t * j * 2);
        let mut adj = Vec::with_capacity(graphs.len() * t * j * j);
        for g in graphs {
            if g.steps() != t || g.joints() != j {
                return Err(Error::dim("graphs in a batch must share T and J"));
            }
            verts.extend_from_slice(g.vertices.data());
            adj.extend_from_slice(g.adjacency.data());
        }
        let n = graphs.len();
        let images = match images {
            None => None,
            Some(list) => {
                if list.len() != n {
                    return Err(Error::input(format!("{} image tensors for {n} graphs", list.len())));
                }
                let shape = list[0].shape().to_vec();
                let mut data = Vec::with_capacity(n * list[0].len());
                for im in list {
                    if im.shape() != shape.as_slice() {
                        return Err(Error::input("image tensors in a batch must share a shape"));
                    }
                    data.extend_from_slice(im.data());
                }
                let mut full = vec![n];
                full.extend(shape);
                Some(DiffArray::new(full, data)?)
            }
        };
        Ok(Self {
            vertices: DiffArray::new(vec![n, t, j, 2], verts)?,
            adjacency: DiffArray::new(vec![n, t, j, j], adj)?,
            images,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.vertices.shape()[0]
    }
}

/// Recorded outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[N, T̃, J, 3]`
    pub poses: Var,
    /// Learned adjacency `[N, T, J, J]`.
    pub adjacency: Var,
}

/// The network: input embedding, adjacency learner, SPGCNN stack, optional
/// image extractor, and the time-extrapolating TXCNN stack.
#[derive(Debug, Clone)]
pub struct SkeletonGraph {
    config: ModelConfig,
    input_embed: ConvLayer,
    adjacency: Vec<ConvLayer>,
    spgcnn: Vec<(ConvLayer, ConvLayer)>,
    vision: Vec<ConvLayer>,
    txcnn: Vec<ConvLayer>,
    head: Option<ConvLayer>,
}

struct Ctx<'t, 'p, S> {
    tape: &'t mut Tape<S>,
    bind: &'t Bindings,
    phase: Phase<'p, S>,
    norm: NormConfig<S>,
}

impl<S: Scalar> Ctx<'_, '_, S> {
    fn block(&mut self, layer: &ConvLayer, x: Var) -> Result<Var> {
        let w = self.bind.get(&layer.weight_name())?;
        let b = self.bind.get(&layer.bias_name())?;
        let mut y = self.tape.conv2d(x, w, Some(b), layer.padding(), layer.stride)?;
        if layer.bn {
            let gamma = self.bind.get(&layer.gamma_name())?;
            let beta = self.bind.get(&layer.beta_name())?;
            let missing = || Error::usage(format!("no running statistics for `{}`", layer.prefix));
            let mode = match &mut self.phase {
                Phase::Train(stats) => NormMode::Train(Some(stats.get_mut(&layer.prefix).ok_or_else(missing)?)),
                Phase::Eval(stats) => NormMode::Eval(stats.get(&layer.prefix).ok_or_else(missing)?),
            };
            y = self.tape.batch_norm(y, gamma, beta, mode, self.norm)?;
        }
        if layer.act {
            let slope = self.bind.get(&layer.slope_name())?;
            y = self.tape.prelu(y, slope)?;
        }
        Ok(y)
    }

    fn staged(&mut self, stage: &str, layer: &ConvLayer, x: Var) -> Result<Var> {
        self.block(layer, x).map_err(|e| e.in_stage(stage))
    }
}

// [N,F,T,J] <-> [N,T,J,F]
const FTJ_TO_TJF: [usize; 4] = [0, 2, 3, 1];
const TJF_TO_FTJ: [usize; 4] = [0, 3, 1, 2];

impl SkeletonGraph {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (t, tp, f) = (config.obs_len, config.pred_len, config.features);
        let bn = config.batch_norm;
        let input_embed = ConvLayer::new("input_embed", 2, f, 3, 1, false, false);
        let adjacency = if config.learn_adjacency {
            vec![
                ConvLayer::new("adjacency.0", t, t, 3, 1, bn, true),
                ConvLayer::new("adjacency.1", t, t, 3, 1, false, false),
            ]
        } else {
            Vec::new()
        };
        let spgcnn = (0..config.n_spgcnn)
            .map(|l| {
                (
                    ConvLayer::new(format!("spgcnn.{l}.spatial"), f, f, 1, 1, bn, true),
                    ConvLayer::new(format!("spgcnn.{l}.temporal"), t, t, 3, 1, bn, true),
                )
            })
            .collect();
        let vision = if config.vision == VisionMode::None {
            Vec::new()
        } else {
            let mut cin = config.image_input_channels();
            VISION_PLAN
                .iter()
                .enumerate()
                .map(|(i, &cout)| {
                    let layer = ConvLayer::new(format!("vision.{i}"), cin, cout, 3, if i == 0 { 1 } else { 2 }, bn, true);
                    cin = cout;
                    layer
                })
                .collect()
        };
        let n = config.n_txcnn;
        let txcnn = (0..n)
            .map(|l| {
                let cin = if l == 0 { t + config.vision_channels() } else { tp };
                let last = l == n - 1;
                ConvLayer::new(format!("txcnn.{l}"), cin, tp, 3, 1, bn && !last, !last)
            })
            .collect();
        let head = (f != 3).then(|| ConvLayer::new("head", f, 3, 1, 1, false, false));
        Ok(Self {
            config,
            input_embed,
            adjacency,
            spgcnn,
            vision,
            txcnn,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every convolution layer in parameter order.
    pub fn layers(&self) -> Vec<&ConvLayer> {
        let mut out = vec![&self.input_embed];
        out.extend(&self.adjacency);
        for (s, t) in &self.spgcnn {
            out.push(s);
            out.push(t);
        }
        out.extend(&self.vision);
        out.extend(&self.txcnn);
        out.extend(&self.head);
        out
    }

    fn check_input<S: Scalar>(&self, input: &ModelInput<S>) -> Result<()> {
        let c = &self.config;
        let n = input.batch_size();
        let vs = input.vertices.shape();
        if vs != [n, c.obs_len, c.joints, 2] {
            return Err(Error::dim(format!(
                "vertices {vs:?} do not match T={} J={}",
                c.obs_len, c.joints
            )));
        }
        if input.adjacency.shape() != [n, c.obs_len, c.joints, c.joints] {
            return Err(Error::dim(format!(
                "adjacency {:?} does not match T={} J={}",
                input.adjacency.shape(),
                c.obs_len,
                c.joints
            )));
        }
        if c.vision != VisionMode::None {
            let im = input
                .images
                .as_ref()
                .ok_or_else(|| Error::input(format!("vision mode {:?} needs images", c.vision)))?;
            let s = im.shape();
            if s.len() != 4 || s[0] != n || s[1] != c.image_input_channels() {
                return Err(Error::input(format!(
                    "images {s:?} do not match batch {n} with {} channels",
                    c.image_input_channels()
                )));
            }
            if s[2] < MIN_IMAGE_SIZE || s[3] < MIN_IMAGE_SIZE {
                return Err(Error::input(format!(
                    "image {}x{} smaller than {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}",
                    s[2], s[3]
                )));
            }
        }
        Ok(())
    }

    /// Records the full forward pass on `tape` using parameters already bound to it.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Bindings,
        phase: Phase<'_, S>,
        input: &ModelInput<S>,
    ) -> Result<ForwardOutput> {
        self.check_input(input)?;
        let mut ctx = Ctx {
            tape,
            bind,
            phase,
            norm: NormConfig::default(),
        };
        let verts = ctx.tape.constant(input.vertices.clone());
        let mut base_adj = input.adjacency.clone();
        if self.config.normalize_adjacency {
            normalize_symmetric(&mut base_adj);
        }
        let adj = ctx.tape.constant(base_adj);

        // [N,T,J,2] -> [N,2,T,J] -> [N,F,T,J]
        let v = ctx.tape.permute(verts, &TJF_TO_FTJ)?;
        let mut x = ctx.staged("input_embed", &self.input_embed, v)?;

        let learned = self.learn_adjacency(&mut ctx, adj)?;
        for (l, (spatial, temporal)) in self.spgcnn.iter().enumerate() {
            let y = self.spgcnn_layer(&mut ctx, l, spatial, temporal, x, learned)?;
            x = if l > 0 { ctx.tape.add(x, y)? } else { y };
        }
        let graph_emb = ctx.tape.permute(x, &FTJ_TO_TJF)?;
        let vision = self.extract_vision(&mut ctx, input)?;
        let fused = fuse(ctx.tape, graph_emb, vision)?;
        let poses = self.txcnn_stack(&mut ctx, fused)?;
        Ok(ForwardOutput {
            poses,
            adjacency: learned,
        })
    }

    fn learn_adjacency<S: Scalar>(&self, ctx: &mut Ctx<'_, '_, S>, adj: Var) -> Result<Var> {
        let mut a = adj;
        for layer in &self.adjacency {
            a = ctx.staged("learn_adjacency", layer, a)?;
        }
        Ok(a)
    }

    fn spgcnn_layer<S: Scalar>(
        &self,
        ctx: &mut Ctx<'_, '_, S>,
        index: usize,
        spatial: &ConvLayer,
        temporal: &ConvLayer,
        x: Var,
        adj: Var,
    ) -> Result<Var> {
        let stage = format!("spgcnn[{index}]");
        let agg = ctx.tape.graph_aggregate(x, adj).map_err(|e| e.in_stage(&stage))?;
        let s = ctx.staged(&stage, spatial, agg)?;
        let s = ctx.tape.permute(s, &FTJ_TO_TJF)?;
        let t = ctx.staged(&stage, temporal, s)?;
        ctx.tape.permute(t, &TJF_TO_FTJ)
    }

    fn extract_vision<S: Scalar>(&self, ctx: &mut Ctx<'_, '_, S>, input: &ModelInput<S>) -> Result<Option<Var>> {
        if self.vision.is_empty() {
            return Ok(None);
        }
        let images = input.images.as_ref().expect("checked by check_input");
        let mut h = ctx.tape.constant(images.clone());
        for layer in &self.vision {
            h = ctx.staged("vision", layer, h)?;
        }
        let pooled = ctx
            .tape
            .adaptive_avg_pool2d(h, self.config.joints, self.config.features)
            .map_err(|e| e.in_stage("vision"))?;
        Ok(Some(pooled))
    }

    fn txcnn_stack<S: Scalar>(&self, ctx: &mut Ctx<'_, '_, S>, fused: Var) -> Result<Var> {
        let n = self.txcnn.len();
        let mut y = ctx.staged("txcnn", &self.txcnn[0], fused)?;
        for layer in &self.txcnn[1..n - 1] {
            let z = ctx.staged("txcnn", layer, y)?;
            y = if self.config.txcnn_residual { ctx.tape.add(y, z)? } else { z };
        }
        y = ctx.staged("txcnn", &self.txcnn[n - 1], y)?;
        if let Some(head) = &self.head {
            let p = ctx.tape.permute(y, &TJF_TO_FTJ)?;
            let p = ctx.staged("head", head, p)?;
            y = ctx.tape.permute(p, &FTJ_TO_TJF)?;
        }
        Ok(y)
    }

    /// Eval-mode forward on a fresh tape; returns poses `[N,T̃,J,3]` and the learned adjacency.
    pub fn infer<S: Scalar>(&self, params: &ModelParams<S>, input: &ModelInput<S>) -> Result<(DiffArray<S>, DiffArray<S>)> {
        let mut tape = Tape::new();
        let bind = params.params.bind(&mut tape);
        let out = self.forward(&mut tape, &bind, Phase::Eval(&params.stats), input)?;
        Ok((tape.value(out.poses).clone(), tape.value(out.adjacency).clone()))
    }
}

/// Channel-axis concatenation of the graph embedding `[N,T,J,F]` with image features `[N,C,J,F]`.
pub fn fuse<S: Scalar>(tape: &mut Tape<S>, graph_emb: Var, vision: Option<Var>) -> Result<Var> {
    match vision {
        None => Ok(graph_emb),
        Some(v) => {
            let (gs, vs) = (tape.shape(graph_emb), tape.shape(v));
            if gs.len() != 4 || vs.len() != 4 || gs[0] != vs[0] || gs[2..] != vs[2..] {
                return Err(Error::dim(format!("fuse: graph {gs:?} and vision {vs:?} disagree spatially")));
            }
            tape.concat(&[graph_emb, v], 1)
        }
    }
}

/// `D^{-1/2} A D^{-1/2}` per timestep, with degrees from absolute row sums.
fn normalize_symmetric<S: Scalar>(adj: &mut DiffArray<S>) {
    let s = adj.shape().to_vec();
    let j = s[s.len() - 1];
    for m in adj.data_mut().chunks_mut(j * j) {
        let d: Vec<S> = (0..j)
            .map(|i| {
                let deg: S = m[i * j..(i + 1) * j].iter().map(|v| v.abs()).sum();
                if deg > S::zero() { S::one() / deg.sqrt() } else { S::zero() }
            })
            .collect();
        for r in 0..j {
            for c in 0..j {
                m[r * j + c] = d[r] * m[r * j + c] * d[c];
            }
        }
    }
}
