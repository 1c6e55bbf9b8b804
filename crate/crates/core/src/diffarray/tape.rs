use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::array::{numel, DiffArray};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics tracked by batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// How a batch-normalization call sources its statistics.
#[derive(Debug)]
pub enum NormMode<'a, S> {
    /// Normalize with batch statistics, optionally folding them into running statistics.
    Train(Option<&'a mut RunningStats<S>>),
    /// Normalize with frozen running statistics.
    Eval(&'a RunningStats<S>),
}

#[derive(Debug, Clone, Copy)]
pub struct NormConfig<S> {
    pub eps: S,
    pub momentum: S,
}

impl<S: Scalar> Default for NormConfig<S> {
    fn default() -> Self {
        Self {
            eps: S::from_f64(1e-5),
            momentum: S::from_f64(0.1),
        }
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Abs(Var),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    IndexSelect {
        input: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
        stride: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    PRelu {
        input: Var,
        slope: Var,
    },
    GraphAggregate {
        x: Var,
        adj: Var,
    },
    AdaptiveAvgPool {
        input: Var,
    },
    NormLast {
        input: Var,
    },
    CosineLast {
        a: Var,
        b: Var,
        eps: S,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::PRelu { .. } => "prelu",
            Op::GraphAggregate { .. } => "graph_aggregate",
            Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
            Op::NormLast { .. } => "norm",
            Op::CosineLast { .. } => "cosine_similarity",
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: DiffArray<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records primitives in execution order and replays them backwards.
///
/// Every input of a node was recorded before the node itself, so walking
/// the node list from the end is a reverse topological order.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    #[cfg(test)]
    pub(crate) corrupt_conv_backward: bool,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s);
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            #[cfg(test)]
            corrupt_conv_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node together with its saved context.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.nodes.shrink_to_fit();
    }

    /// Records an input. It receives a gradient iff `array.requires_grad()`.
    pub fn leaf(&mut self, array: DiffArray<S>) -> Var {
        let needs_grad = array.requires_grad();
        self.nodes.push(Node {
            value: array,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, array: DiffArray<S>) -> Var {
        self.leaf(array.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &DiffArray<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        let name = op.name();
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::non_finite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = DiffArray::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        self.push(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x - *y).collect();
        self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x * *y).collect();
        self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        let data = self.data(a).iter().map(|x| *x * s).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, s), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x.abs()).collect();
        self.push(self.shape(a).to_vec(), data, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|x| *x * *x).collect();
        self.push(self.shape(a).to_vec(), data, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum();
        self.push(vec![1], vec![s], Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = S::from_f64(self.data(a).len() as f64);
        let s: S = self.data(a).iter().copied().sum();
        self.push(vec![1], vec![s / n], Op::MeanAll(a), &[a])
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.data(a).len() {
            return Err(Error::dim(format!(
                "reshape: {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let data = self.data(a).to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(a), &[a])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if axes.len() != in_shape.len()
            || axes.iter().any(|&ax| ax >= in_shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(Error::dim(format!(
                "permute: {axes:?} is not a permutation of {} axes",
                in_shape.len()
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
        let map = permute_map(&in_shape, axes);
        let src = self.data(a);
        let data = map.iter().map(|&i| src[i]).collect();
        self.push(out_shape, data, Op::Permute { input: a, axes: axes.to_vec() }, &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::usage("concat of zero arrays"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat: {s:?} incompatible with {base:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in inputs {
                let d = self.shape(*v)[axis];
                let block = d * inner;
                data.extend_from_slice(&self.data(*v)[o * block..(o + 1) * block]);
            }
        }
        self.push(
            out_shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("index_select axis {axis} out of range")));
        }
        if indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::dim(format!(
                "index_select: indices out of range for axis size {}",
                shape[axis]
            )));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &k in indices {
                let start = (o * dim + k) * inner;
                data.extend_from_slice(&src[start..start + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        self.push(
            out_shape,
            data,
            Op::IndexSelect {
                input: a,
                axis,
                indices: indices.to_vec(),
            },
            &[a],
        )
    }

    // ---- network primitives -----------------------------------------

    /// 2D cross-correlation over `[N, C_in, H, W]` with a `[C_out, C_in, kh, kw]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
        stride: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::dim(format!("conv2d: expected 4-d input and kernel, got {xs:?} and {ks:?}")));
        }
        let [n, cin, h, w] = [xs[0], xs[1], xs[2], xs[3]];
        let [cout, kcin, kh, kw] = [ks[0], ks[1], ks[2], ks[3]];
        if kcin != cin {
            return Err(Error::dim(format!(
                "conv2d: kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if stride == 0 {
            return Err(Error::param("conv2d: stride must be >= 1"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::dim(format!(
                "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim(format!("conv2d: bias shape {:?} != [{cout}]", self.shape(b))));
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let x = self.data(input);
        let k = self.data(kernel);
        let mut out = vec![S::zero(); n * cout * oh * ow];
        let geo = ConvGeometry { h, w, kh, kw, oh, ow, padding, stride };
        for b in 0..n {
            for co in 0..cout {
                let plane = &mut out[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                if let Some(bv) = bias {
                    let bval = self.nodes[bv.0].value.data()[co];
                    plane.iter_mut().for_each(|v| *v = bval);
                }
                for ci in 0..cin {
                    let xin = &x[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                    let kern = &k[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
                    geo.for_each_tap(|ky, kx, oy, ox, iy, ix| {
                        plane[oy * ow + ox] = plane[oy * ow + ox] + xin[iy * w + ix] * kern[ky * kw + kx];
                    });
                }
            }
        }
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            vec![n, cout, oh, ow],
            out,
            Op::Conv2d { input, kernel, bias, padding, stride },
            &inputs,
        )
    }

    /// Per-channel normalization over every axis except axis 1.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, S>,
        cfg: NormConfig<S>,
    ) -> Result<Var> {
        if !(cfg.eps > S::zero()) {
            return Err(Error::param("batch_norm: eps must be > 0"));
        }
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("batch_norm: input needs a channel axis"));
        }
        let c = shape[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "batch_norm: gamma/beta must have shape [{c}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (outer, _, inner) = split_axis(&shape, 1);
        let count = S::from_f64((outer * inner) as f64);
        let x = self.data(input);
        let train = matches!(mode, NormMode::Train(_));
        let (mean, var) = match &mode {
            NormMode::Train(_) => {
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for ch in 0..c {
                    let mut s = S::zero();
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        s = s + x[base..base + inner].iter().copied().sum();
                    }
                    let m = s / count;
                    let mut v = S::zero();
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        v = v + x[base..base + inner].iter().map(|&e| (e - m) * (e - m)).sum();
                    }
                    mean[ch] = m;
                    var[ch] = v / count;
                }
                (mean, var)
            }
            NormMode::Eval(stats) => {
                if stats.channels() != c {
                    return Err(Error::dim(format!(
                        "batch_norm: running stats track {} channels, input has {c}",
                        stats.channels()
                    )));
                }
                (stats.mean.clone(), stats.var.clone())
            }
        };
        let inv_std: Vec<S> = var.iter().map(|v| S::one() / (*v + cfg.eps).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![S::zero(); x.len()];
        let mut out = vec![S::zero(); x.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        if let NormMode::Train(Some(stats)) = mode {
            if stats.channels() != c {
                return Err(Error::dim(format!(
                    "batch_norm: running stats track {} channels, input has {c}",
                    stats.channels()
                )));
            }
            let m = cfg.momentum;
            for ch in 0..c {
                stats.mean[ch] = (S::one() - m) * stats.mean[ch] + m * mean[ch];
                stats.var[ch] = (S::one() - m) * stats.var[ch] + m * var[ch];
            }
        }
        self.push(
            shape,
            out,
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train },
            &[input, gamma, beta],
        )
    }

    /// Parametric ReLU with a shared (`[1]`) or per-channel (`[C]`, axis 1) slope.
    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let ss = self.shape(slope).to_vec();
        let per_channel = if ss == [1] {
            false
        } else if shape.len() >= 2 && ss == [shape[1]] {
            true
        } else {
            return Err(Error::dim(format!("prelu: slope shape {ss:?} incompatible with {shape:?}")));
        };
        let x = self.data(input);
        let a = self.data(slope);
        let mut out = Vec::with_capacity(x.len());
        if per_channel {
            let (outer, c, inner) = split_axis(&shape, 1);
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    out.extend(x[base..base + inner].iter().map(|&v| if v >= S::zero() { v } else { a[ch] * v }));
                }
            }
        } else {
            out.extend(x.iter().map(|&v| if v >= S::zero() { v } else { a[0] * v }));
        }
        self.push(shape, out, Op::PRelu { input, slope }, &[input, slope])
    }

    /// Per-timestep neighbourhood aggregation `y[n,f,t,i] = sum_j adj[n,t,i,j] * x[n,f,t,j]`.
    pub fn graph_aggregate(&mut self, x: Var, adj: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let as_ = self.shape(adj).to_vec();
        if xs.len() != 4 || as_.len() != 4 || as_[0] != xs[0] || as_[1] != xs[2] || as_[2] != xs[3] || as_[3] != xs[3] {
            return Err(Error::dim(format!(
                "graph_aggregate: features {xs:?} (N,F,T,J) and adjacency {as_:?} (N,T,J,J) disagree"
            )));
        }
        let [n, f, t, j] = [xs[0], xs[1], xs[2], xs[3]];
        let xd = self.data(x);
        let ad = self.data(adj);
        let mut out = vec![S::zero(); xd.len()];
        for b in 0..n {
            for ti in 0..t {
                let amat = &ad[(b * t + ti) * j * j..(b * t + ti + 1) * j * j];
                for fi in 0..f {
                    let row = ((b * f + fi) * t + ti) * j;
                    let xv = &xd[row..row + j];
                    for i in 0..j {
                        out[row + i] = amat[i * j..(i + 1) * j].iter().zip(xv).map(|(a, v)| *a * *v).sum();
                    }
                }
            }
        }
        self.push(xs, out, Op::GraphAggregate { x, adj }, &[x, adj])
    }

    /// Average pooling of `[N, C, H, W]` onto a fixed `out_h x out_w` grid.
    pub fn adaptive_avg_pool2d(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::dim(format!("adaptive_avg_pool2d: bad input {s:?} or output {out_h}x{out_w}")));
        }
        let [n, c, h, w] = [s[0], s[1], s[2], s[3]];
        let x = self.data(input);
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for p in 0..n * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for oy in 0..out_h {
                let (y0, y1) = pool_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_bin(ox, w, out_w);
                    let mut acc = S::zero();
                    for iy in y0..y1 {
                        acc = acc + plane[iy * w + x0..iy * w + x1].iter().copied().sum();
                    }
                    out.push(acc / S::from_f64(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        self.push(vec![n, c, out_h, out_w], out, Op::AdaptiveAvgPool { input }, &[input])
    }

    /// Euclidean norm over the last axis. The gradient at a zero vector is zero.
    pub fn norm_last(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let d = *shape.last().expect("non-empty shape");
        let data = self
            .data(input)
            .chunks(d)
            .map(|v| v.iter().map(|x| *x * *x).sum::<S>().sqrt())
            .collect();
        self.push(reduced_shape(&shape), data, Op::NormLast { input }, &[input])
    }

    /// Cosine similarity over the last axis, `dot / (max(|a|,eps) max(|b|,eps))`.
    pub fn cosine_last(&mut self, a: Var, b: Var, eps: S) -> Result<Var> {
        self.same_shape(a, b, "cosine_similarity")?;
        if !(eps > S::zero()) {
            return Err(Error::param("cosine_similarity: eps must be > 0"));
        }
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("non-empty shape");
        let data = self
            .data(a)
            .chunks(d)
            .zip(self.data(b).chunks(d))
            .map(|(u, v)| cosine_parts(u, v, eps).0)
            .collect();
        self.push(reduced_shape(&shape), data, Op::CosineLast { a, b, eps }, &[a, b])
    }

    // ---- reverse pass ------------------------------------------------

    /// Accumulates `d loss / d leaf` into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            self.backward_node(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[S], adj: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Vec<S>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(buf) => add_into(buf, &delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -*v).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(y).map(|(g, y)| *g * *y).collect());
                acc(*b, g.iter().zip(x).map(|(g, x)| *g * *x).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| *v * *s).collect()),
            Op::Abs(a) => {
                let x = self.data(*a);
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, x)| if *x > S::zero() { *g } else if *x < S::zero() { -*g } else { S::zero() })
                        .collect(),
                );
            }
            Op::Square(a) => {
                let x = self.data(*a);
                let two = S::from_f64(2.0);
                acc(*a, g.iter().zip(x).map(|(g, x)| two * *g * *x).collect());
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; self.data(*a).len()]),
            Op::MeanAll(a) => {
                let n = self.data(*a).len();
                acc(*a, vec![g[0] / S::from_f64(n as f64); n]);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Permute { input, axes } => {
                let map = permute_map(self.shape(*input), axes);
                let mut dx = vec![S::zero(); g.len()];
                for (o, &i) in map.iter().enumerate() {
                    dx[i] = g[o];
                }
                acc(*input, dx);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let d = self.shape(*v)[*axis];
                    let mut dx = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        dx.extend_from_slice(&g[start..start + d * inner]);
                    }
                    offset += d;
                    acc(*v, dx);
                }
            }
            Op::IndexSelect { input, axis, indices } => {
                let (outer, dim, inner) = split_axis(self.shape(*input), *axis);
                let mut dx = vec![S::zero(); outer * dim * inner];
                for o in 0..outer {
                    for (k, &src) in indices.iter().enumerate() {
                        let from = (o * indices.len() + k) * inner;
                        let to = (o * dim + src) * inner;
                        add_into(&mut dx[to..to + inner], &g[from..from + inner]);
                    }
                }
                acc(*input, dx);
            }
            Op::Conv2d { input, kernel, bias, padding, stride } => {
                let xs = self.shape(*input);
                let ks = self.shape(*kernel);
                let [n, cin, h, w] = [xs[0], xs[1], xs[2], xs[3]];
                let [cout, _, kh, kw] = [ks[0], ks[1], ks[2], ks[3]];
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                let geo = ConvGeometry { h, w, kh, kw, oh, ow, padding: *padding, stride: *stride };
                let x = self.data(*input);
                let k = self.data(*kernel);
                let mut dx = vec![S::zero(); x.len()];
                let mut dk = vec![S::zero(); k.len()];
                #[cfg(test)]
                let flip = self.corrupt_conv_backward;
                #[cfg(not(test))]
                let flip = false;
                for b in 0..n {
                    for co in 0..cout {
                        let gp = &g[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                        for ci in 0..cin {
                            let xoff = (b * cin + ci) * h * w;
                            let koff = (co * cin + ci) * kh * kw;
                            geo.for_each_tap(|ky, kx, oy, ox, iy, ix| {
                                let gv = gp[oy * ow + ox];
                                let kidx = if flip { (kh - 1 - ky) * kw + (kw - 1 - kx) } else { ky * kw + kx };
                                dx[xoff + iy * w + ix] = dx[xoff + iy * w + ix] + gv * k[koff + kidx];
                                dk[koff + ky * kw + kx] = dk[koff + ky * kw + kx] + gv * x[xoff + iy * w + ix];
                            });
                        }
                    }
                }
                acc(*input, dx);
                acc(*kernel, dk);
                if let Some(bv) = bias {
                    let mut db = vec![S::zero(); cout];
                    for b in 0..n {
                        for (co, dbv) in db.iter_mut().enumerate() {
                            let gp = &g[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                            *dbv = *dbv + gp.iter().copied().sum();
                        }
                    }
                    acc(*bv, db);
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let shape = self.shape(*input);
                let (outer, c, inner) = split_axis(shape, 1);
                let gm = self.data(*gamma);
                let count = S::from_f64((outer * inner) as f64);
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + g[i];
                        }
                    }
                }
                let mut dx = vec![S::zero(); g.len()];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        let scale = gm[ch] * inv_std[ch];
                        for i in base..base + inner {
                            dx[i] = if *train {
                                scale * (g[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
                acc(*input, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::PRelu { input, slope } => {
                let shape = self.shape(*input);
                let x = self.data(*input);
                let a = self.data(*slope);
                let mut dx = vec![S::zero(); x.len()];
                let mut da = vec![S::zero(); a.len()];
                let per_channel = a.len() > 1;
                let (outer, c, inner) = if shape.len() >= 2 { split_axis(shape, 1) } else { (1, 1, x.len()) };
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        let si = if per_channel { ch } else { 0 };
                        for i in base..base + inner {
                            if x[i] >= S::zero() {
                                dx[i] = g[i];
                            } else {
                                dx[i] = g[i] * a[si];
                                da[si] = da[si] + g[i] * x[i];
                            }
                        }
                    }
                }
                acc(*input, dx);
                acc(*slope, da);
            }
            Op::GraphAggregate { x, adj: a } => {
                let xs = self.shape(*x);
                let [n, f, t, j] = [xs[0], xs[1], xs[2], xs[3]];
                let xd = self.data(*x);
                let ad = self.data(*a);
                let mut dx = vec![S::zero(); xd.len()];
                let mut da = vec![S::zero(); ad.len()];
                for b in 0..n {
                    for ti in 0..t {
                        let aoff = (b * t + ti) * j * j;
                        for fi in 0..f {
                            let row = ((b * f + fi) * t + ti) * j;
                            for i in 0..j {
                                let gv = g[row + i];
                                for jj in 0..j {
                                    dx[row + jj] = dx[row + jj] + ad[aoff + i * j + jj] * gv;
                                    da[aoff + i * j + jj] = da[aoff + i * j + jj] + gv * xd[row + jj];
                                }
                            }
                        }
                    }
                }
                acc(*x, dx);
                acc(*a, da);
            }
            Op::AdaptiveAvgPool { input } => {
                let s = self.shape(*input);
                let [n, c, h, w] = [s[0], s[1], s[2], s[3]];
                let os = node.value.shape();
                let (out_h, out_w) = (os[2], os[3]);
                let mut dx = vec![S::zero(); n * c * h * w];
                for p in 0..n * c {
                    for oy in 0..out_h {
                        let (y0, y1) = pool_bin(oy, h, out_h);
                        for ox in 0..out_w {
                            let (x0, x1) = pool_bin(ox, w, out_w);
                            let share = g[(p * out_h + oy) * out_w + ox] / S::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    let i = p * h * w + iy * w + ix;
                                    dx[i] = dx[i] + share;
                                }
                            }
                        }
                    }
                }
                acc(*input, dx);
            }
            Op::NormLast { input } => {
                let x = self.data(*input);
                let d = *self.shape(*input).last().expect("non-empty");
                let norms = node.value.data();
                let mut dx = vec![S::zero(); x.len()];
                for (r, (chunk, out)) in x.chunks(d).zip(dx.chunks_mut(d)).enumerate() {
                    if norms[r] > S::zero() {
                        for (o, v) in out.iter_mut().zip(chunk) {
                            *o = g[r] * *v / norms[r];
                        }
                    }
                }
                acc(*input, dx);
            }
            Op::CosineLast { a, b, eps } => {
                let d = *self.shape(*a).last().expect("non-empty");
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut da = vec![S::zero(); ad.len()];
                let mut db = vec![S::zero(); bd.len()];
                for (r, (u, v)) in ad.chunks(d).zip(bd.chunks(d)).enumerate() {
                    let (_, gu, gv) = cosine_parts(u, v, *eps);
                    for k in 0..d {
                        da[r * d + k] = g[r] * gu[k];
                        db[r * d + k] = g[r] * gv[k];
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
        }
    }
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

/// Value and partial derivatives of the eps-guarded cosine similarity.
fn cosine_parts<S: Scalar>(u: &[S], v: &[S], eps: S) -> (S, Vec<S>, Vec<S>) {
    let dot: S = u.iter().zip(v).map(|(a, b)| *a * *b).sum();
    let nu = u.iter().map(|a| *a * *a).sum::<S>().sqrt();
    let nv = v.iter().map(|a| *a * *a).sum::<S>().sqrt();
    let du = nu.max(eps);
    let dv = nv.max(eps);
    let c = dot / (du * dv);
    if nu == S::zero() || nv == S::zero() {
        return (c, vec![S::zero(); u.len()], vec![S::zero(); v.len()]);
    }
    // d/du [dot / (max(|u|,eps) max(|v|,eps))]; the max branch is constant below eps.
    let gu = u
        .iter()
        .zip(v)
        .map(|(a, b)| {
            let norm_term = if nu > eps { c * *a / (nu * nu) } else { S::zero() };
            *b / (du * dv) - norm_term
        })
        .collect();
    let gv = v
        .iter()
        .zip(u)
        .map(|(b, a)| {
            let norm_term = if nv > eps { c * *b / (nv * nv) } else { S::zero() };
            *a / (du * dv) - norm_term
        })
        .collect();
    (c, gu, gv)
}

fn pool_bin(i: usize, size: usize, out: usize) -> (usize, usize) {
    let start = i * size / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end.max(start + 1))
}

/// For each output flat index, the input flat index it reads from.
fn permute_map(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let nd = in_shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel(in_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    padding: usize,
    stride: usize,
}

impl ConvGeometry {
    /// Visits every (kernel tap, output pixel, input pixel) triple that lies inside the unpadded input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let (p, s) = (self.padding as isize, self.stride as isize);
        for ky in 0..self.kh {
            for oy in 0..self.oh {
                let iy = oy as isize * s + ky as isize - p;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                for kx in 0..self.kw {
                    for ox in 0..self.ow {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        f(ky, kx, oy, ox, iy as usize, ix as usize);
                    }
                }
            }
        }
    }
}
