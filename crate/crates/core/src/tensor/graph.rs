use super::kernels::{self, ConvGeom};
use super::{shape_err, Result, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running mean/variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub initialized: bool,
}

impl RunningStats {
    /// Statistics that have never seen data; eval mode refuses them.
    pub fn uninitialized(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    /// Zero mean, unit variance: the state of a freshly built layer.
    pub fn identity(channels: usize) -> Self {
        Self {
            initialized: true,
            ..Self::uninitialized(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub enum BatchNormMode<'a> {
    Train { stats: &'a mut RunningStats, momentum: f32 },
    Eval(&'a RunningStats),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu(TensorId),
    Sigmoid(TensorId),
    Softmax(TensorId),
    MaxPool {
        input: TensorId,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(TensorId),
    Linear {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    ChannelSlice {
        input: TensorId,
        start: usize,
    },
    Concat(Vec<TensorId>),
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    ScaleChannels {
        input: TensorId,
        gate: TensorId,
    },
    Sum(TensorId),
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// An append-only tape of recorded operations.
///
/// Nodes are stored in creation order, which is a topological order, and
/// [`Graph::backward`] walks them once in reverse. A graph built with
/// [`Graph::inference`] records values only and cannot be differentiated.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl AsMut<Graph> for Graph {
    fn as_mut(&mut self) -> &mut Graph {
        self
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that keeps no backward bookkeeping.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let requires = self.grad_enabled && tensor.requires_grad;
        self.push(tensor.requires_grad(requires), Op::Leaf)
    }

    /// Convenience for a leaf that must be differentiated.
    pub fn param(&mut self, tensor: Tensor) -> TensorId {
        self.leaf(tensor.requires_grad(true))
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn value(&self, id: TensorId) -> &[f32] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].tensor.grad()
    }

    pub fn take_tensor(&mut self, id: TensorId) -> Tensor {
        std::mem::replace(&mut self.nodes[id.0].tensor, Tensor::scalar(0.0))
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f32>, inputs: &[TensorId], op: Op) -> TensorId {
        let requires = self.grad_enabled && inputs.iter().any(|&i| self.requires(i));
        let tensor = Tensor {
            shape,
            data,
            grad: None,
            requires_grad: requires,
        };
        let op = if requires { op } else { Op::Leaf };
        self.push(tensor, op)
    }

    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let xd = self.tensor(input).dims4("conv2d", "input")?;
        let kd = self.tensor(kernel).dims4("conv2d", "kernel")?;
        let geom = ConvGeom::new(xd, kd, stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.o] {
                return Err(shape_err("conv2d", "bias", format!("[{}]", geom.o), self.shape(b)));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.record(
            vec![geom.n, geom.o, geom.ho, geom.wo],
            out,
            &inputs,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn batch_norm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mode: BatchNormMode<'_>,
        eps: f32,
    ) -> Result<TensorId> {
        let dims = self.tensor(input).dims4("batch_norm", "input")?;
        let c = dims[1];
        for (id, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(id) != [c] {
                return Err(shape_err("batch_norm", name, format!("[{c}]"), self.shape(id)));
            }
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                message: format!("eps must be positive, got {eps}"),
            });
        }
        let (mean, inv_std, batch_stats) = match mode {
            BatchNormMode::Train { stats, momentum } => {
                if stats.channels() != c {
                    return Err(shape_err(
                        "batch_norm",
                        "running_stats",
                        format!("{c} channels"),
                        &[stats.channels()],
                    ));
                }
                let (m, v) = kernels::channel_moments(self.value(input), dims);
                let count = (dims[0] * dims[2] * dims[3]) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for ch in 0..c {
                    let rm = &mut stats.mean[ch];
                    *rm = (1.0 - momentum) * *rm + momentum * m[ch] as f32;
                    let rv = &mut stats.var[ch];
                    *rv = (1.0 - momentum) * *rv + momentum * (v[ch] * unbias) as f32;
                }
                stats.initialized = true;
                let inv: Vec<f32> = v.iter().map(|&v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
                (m.iter().map(|&m| m as f32).collect::<Vec<f32>>(), inv, true)
            }
            BatchNormMode::Eval(stats) => {
                if !stats.initialized {
                    return Err(TensorError::UninitializedStats);
                }
                if stats.channels() != c {
                    return Err(shape_err(
                        "batch_norm",
                        "running_stats",
                        format!("{c} channels"),
                        &[stats.channels()],
                    ));
                }
                let inv = stats
                    .var
                    .iter()
                    .map(|&v| (1.0 / (v as f64 + eps as f64).sqrt()) as f32)
                    .collect();
                (stats.mean.clone(), inv, false)
            }
        };
        let x = self.value(input);
        let g = self.value(gamma);
        let b = self.value(beta);
        let hw = dims[2] * dims[3];
        let mut out = vec![0.0f32; x.len()];
        for (plane, (o, xs)) in out.chunks_mut(hw).zip(x.chunks(hw)).enumerate() {
            let ch = plane % c;
            let scale = g[ch] * inv_std[ch];
            let shift = b[ch] - mean[ch] * scale;
            if batch_stats {
                // (x - mean) first: a constant channel normalizes to exactly beta
                for (o, &x) in o.iter_mut().zip(xs) {
                    *o = (x - mean[ch]) * scale + b[ch];
                }
            } else {
                for (o, &x) in o.iter_mut().zip(xs) {
                    *o = x * scale + shift;
                }
            }
        }
        Ok(self.record(
            dims.to_vec(),
            out,
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
        ))
    }

    fn map_unary(&mut self, input: TensorId, f: impl Fn(f32) -> f32, op: Op) -> TensorId {
        let t = self.tensor(input);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.record(shape, data, &[input], op)
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        self.map_unary(input, |v| v.max(0.0), Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: TensorId) -> TensorId {
        self.map_unary(input, sigmoid, Op::Sigmoid(input))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: TensorId) -> TensorId {
        let t = self.tensor(input);
        let k = *t.shape().last().expect("tensor has at least one axis");
        let mut data = t.data().to_vec();
        data.chunks_mut(k).for_each(softmax_row);
        let shape = t.shape().to_vec();
        self.record(shape, data, &[input], Op::Softmax(input))
    }

    pub fn max_pool2d(&mut self, input: TensorId, size: usize, stride: usize, padding: usize) -> Result<TensorId> {
        let dims = self.tensor(input).dims4("max_pool2d", "input")?;
        if size == 0 || stride == 0 || size > dims[2] + 2 * padding || size > dims[3] + 2 * padding || padding >= size {
            return Err(TensorError::Invalid {
                op: "max_pool2d",
                message: format!("window {size} stride {stride} padding {padding} invalid for input {dims:?}"),
            });
        }
        let (out, argmax, od) = kernels::max_pool2d_forward(self.value(input), dims, size, stride, padding);
        Ok(self.record(od.to_vec(), out, &[input], Op::MaxPool { input, argmax }))
    }

    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId> {
        let [n, c, h, w] = self.tensor(input).dims4("global_avg_pool", "input")?;
        let hw = h * w;
        let data = self
            .value(input)
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        Ok(self.record(vec![n, c], data, &[input], Op::GlobalAvgPool(input)))
    }

    /// `input[N,F] · weight[F,O] + bias[O]`.
    pub fn linear(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let [n, f] = self.tensor(input).dims2("fully_connected", "input")?;
        let [wf, o] = self.tensor(weight).dims2("fully_connected", "weight")?;
        if wf != f {
            return Err(shape_err(
                "fully_connected",
                "weight",
                format!("[{f}, O]"),
                self.shape(weight),
            ));
        }
        if self.shape(bias) != [o] {
            return Err(shape_err("fully_connected", "bias", format!("[{o}]"), self.shape(bias)));
        }
        let mut out = vec![0.0f32; n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(bias));
        }
        kernels::gemm(
            n,
            f,
            o,
            self.value(input),
            (f, 1),
            self.value(weight),
            (o, 1),
            1.0,
            &mut out,
        );
        Ok(self.record(
            vec![n, o],
            out,
            &[input, weight, bias],
            Op::Linear { input, weight, bias },
        ))
    }

    /// Splits `[N,C,H,W]` into `parts` equal groups along the channel axis.
    pub fn split_channels(&mut self, input: TensorId, parts: usize) -> Result<Vec<TensorId>> {
        let [n, c, h, w] = self.tensor(input).dims4("split_channels", "input")?;
        if parts == 0 || c % parts != 0 {
            return Err(TensorError::Invalid {
                op: "split_channels",
                message: format!("{c} channels not divisible into {parts} groups"),
            });
        }
        let cg = c / parts;
        let hw = h * w;
        let mut ids = Vec::with_capacity(parts);
        for p in 0..parts {
            let src = self.value(input);
            let mut data = Vec::with_capacity(n * cg * hw);
            for b in 0..n {
                let off = (b * c + p * cg) * hw;
                data.extend_from_slice(&src[off..off + cg * hw]);
            }
            ids.push(self.record(
                vec![n, cg, h, w],
                data,
                &[input],
                Op::ChannelSlice { input, start: p * cg },
            ));
        }
        Ok(ids)
    }

    pub fn concat_channels(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_channels",
            message: "no parts".into(),
        })?;
        let [n, _, h, w] = self.tensor(first).dims4("concat_channels", "part")?;
        let mut total = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.tensor(p).dims4("concat_channels", "part")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err(
                    "concat_channels",
                    "part",
                    format!("[{n}, C, {h}, {w}]"),
                    self.shape(p),
                ));
            }
            total += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &p in parts {
                let pc = self.shape(p)[1];
                data.extend_from_slice(&self.value(p)[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        Ok(self.record(vec![n, total, h, w], data, parts, Op::Concat(parts.to_vec())))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.record(self.shape(a).to_vec(), data, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.record(self.shape(a).to_vec(), data, &[a, b], Op::Mul(a, b)))
    }

    /// `input[N,C,H,W] * gate[N,C]` broadcast over the spatial axes.
    pub fn scale_channels(&mut self, input: TensorId, gate: TensorId) -> Result<TensorId> {
        let [n, c, h, w] = self.tensor(input).dims4("scale_channels", "input")?;
        if self.shape(gate) != [n, c] {
            return Err(shape_err(
                "scale_channels",
                "gate",
                format!("[{n}, {c}]"),
                self.shape(gate),
            ));
        }
        let hw = h * w;
        let gv = self.value(gate);
        let data = self
            .value(input)
            .chunks(hw)
            .zip(gv)
            .flat_map(|(p, &s)| p.iter().map(move |&v| v * s))
            .collect();
        Ok(self.record(
            vec![n, c, h, w],
            data,
            &[input, gate],
            Op::ScaleChannels { input, gate },
        ))
    }

    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let s = self.value(input).iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.record(vec![1], vec![s], &[input], Op::Sum(input))
    }

    /// Mean cross-entropy of softmax(logits[N,K]) against class indices.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let [n, k] = self.tensor(logits).dims2("cross_entropy", "logits")?;
        if targets.len() != n || targets.iter().any(|&t| t >= k) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                message: format!("need {n} targets in 0..{k}, got {targets:?}"),
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0f64;
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln() + max as f64;
            loss += lse - row[t] as f64;
            softmax_row(row);
        }
        let value = (loss / n as f64) as f32;
        Ok(self.record(
            vec![1],
            vec![value],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, "rhs", format!("{:?}", self.shape(a)), self.shape(b)));
        }
        Ok(())
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires them. Leaves keep their gradients afterwards.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.tensor(loss).numel() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        if !self.requires(loss) {
            return Err(TensorError::Invalid {
                op: "backward",
                message: "loss does not depend on any differentiable leaf".into(),
            });
        }
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].tensor.grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &grad);
            self.nodes[i].tensor.grad = Some(grad);
            for (id, g) in contributions {
                if !self.requires(id) {
                    continue;
                }
                let slot = &mut self.nodes[id.0].tensor.grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, index: usize, dy: &[f32]) -> Vec<(TensorId, Vec<f32>)> {
        let node = &self.nodes[index];
        let out = node.tensor.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let g = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    dy,
                    geom,
                    self.requires(*input),
                    self.requires(*kernel),
                    bias.is_some_and(|b| self.requires(b)),
                );
                let mut v = Vec::new();
                if let Some(dx) = g.input {
                    v.push((*input, dx));
                }
                if let Some(dk) = g.kernel {
                    v.push((*kernel, dk));
                }
                if let (Some(b), Some(db)) = (bias, g.bias) {
                    v.push((*b, db));
                }
                v
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let dims = self
                    .tensor(*input)
                    .dims4("batch_norm", "input")
                    .expect("recorded shape");
                let [n, c, h, w] = dims;
                let hw = h * w;
                let count = (n * hw) as f64;
                let x = self.value(*input);
                let gm = self.value(*gamma);
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for (plane, (xs, gs)) in x.chunks(hw).zip(dy.chunks(hw)).enumerate() {
                    let ch = plane % c;
                    for (&xv, &gv) in xs.iter().zip(gs) {
                        let xhat = (xv - mean[ch]) * inv_std[ch];
                        dgamma[ch] += (gv * xhat) as f64;
                        dbeta[ch] += gv as f64;
                    }
                }
                let mut v = Vec::new();
                if self.requires(*input) {
                    let mut dx = vec![0.0f32; x.len()];
                    for (plane, ((d, xs), gs)) in dx.chunks_mut(hw).zip(x.chunks(hw)).zip(dy.chunks(hw)).enumerate() {
                        let ch = plane % c;
                        let k = gm[ch] * inv_std[ch];
                        if *batch_stats {
                            // dxhat = dy * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                            let mean_dy = (dbeta[ch] / count) as f32;
                            let mean_dy_xhat = (dgamma[ch] / count) as f32;
                            for ((d, &xv), &gv) in d.iter_mut().zip(xs).zip(gs) {
                                let xhat = (xv - mean[ch]) * inv_std[ch];
                                *d = k * (gv - mean_dy - xhat * mean_dy_xhat);
                            }
                        } else {
                            for (d, &gv) in d.iter_mut().zip(gs) {
                                *d = k * gv;
                            }
                        }
                    }
                    v.push((*input, dx));
                }
                v.push((*gamma, dgamma.iter().map(|&v| v as f32).collect()));
                v.push((*beta, dbeta.iter().map(|&v| v as f32).collect()));
                v
            }
            Op::Relu(input) => {
                let d = dy
                    .iter()
                    .zip(out)
                    .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(*input, d)]
            }
            Op::Sigmoid(input) => {
                let d = dy.iter().zip(out).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                vec![(*input, d)]
            }
            Op::Softmax(input) => {
                let k = *node.tensor.shape().last().expect("non-empty shape");
                let mut d = vec![0.0f32; dy.len()];
                for ((d, g), y) in d.chunks_mut(k).zip(dy.chunks(k)).zip(out.chunks(k)) {
                    let dot: f32 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d = y * (g - dot);
                    }
                }
                vec![(*input, d)]
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![0.0f32; self.tensor(*input).numel()];
                for (&g, &a) in dy.iter().zip(argmax) {
                    d[a as usize] += g;
                }
                vec![(*input, d)]
            }
            Op::GlobalAvgPool(input) => {
                let shape = self.shape(*input);
                let hw = shape[2] * shape[3];
                let inv = 1.0 / hw as f32;
                let d = dy.iter().flat_map(|&g| std::iter::repeat_n(g * inv, hw)).collect();
                vec![(*input, d)]
            }
            Op::Linear { input, weight, bias } => {
                let [n, f] = [self.shape(*input)[0], self.shape(*input)[1]];
                let o = self.shape(*weight)[1];
                let mut v = Vec::new();
                if self.requires(*input) {
                    let mut dx = vec![0.0f32; n * f];
                    kernels::gemm(n, o, f, dy, (o, 1), self.value(*weight), (1, o), 0.0, &mut dx);
                    v.push((*input, dx));
                }
                if self.requires(*weight) {
                    let mut dw = vec![0.0f32; f * o];
                    kernels::gemm(f, n, o, self.value(*input), (1, f), dy, (o, 1), 0.0, &mut dw);
                    v.push((*weight, dw));
                }
                if self.requires(*bias) {
                    let mut db = vec![0.0f32; o];
                    for row in dy.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    v.push((*bias, db));
                }
                v
            }
            Op::ChannelSlice { input, start } => {
                let shape = self.shape(*input);
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let cg = node.tensor.shape()[1];
                let mut d = vec![0.0f32; n * c * hw];
                for b in 0..n {
                    let dst = (b * c + start) * hw;
                    d[dst..dst + cg * hw].copy_from_slice(&dy[b * cg * hw..(b + 1) * cg * hw]);
                }
                vec![(*input, d)]
            }
            Op::Concat(parts) => {
                let shape = node.tensor.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                let mut v = Vec::new();
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.requires(p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            let src = (b * c + offset) * hw;
                            d.extend_from_slice(&dy[src..src + pc * hw]);
                        }
                        v.push((p, d));
                    }
                    offset += pc;
                }
                v
            }
            Op::Add(a, b) => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::Mul(a, b) => {
                let da = dy.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                let db = dy.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::ScaleChannels { input, gate } => {
                let shape = self.shape(*input);
                let hw = shape[2] * shape[3];
                let x = self.value(*input);
                let s = self.value(*gate);
                let mut v = Vec::new();
                if self.requires(*input) {
                    let dx = dy
                        .chunks(hw)
                        .zip(s)
                        .flat_map(|(g, &s)| g.iter().map(move |&g| g * s))
                        .collect();
                    v.push((*input, dx));
                }
                if self.requires(*gate) {
                    let dg = dy
                        .chunks(hw)
                        .zip(x.chunks(hw))
                        .map(|(g, x)| g.iter().zip(x).map(|(&g, &x)| (g * x) as f64).sum::<f64>() as f32)
                        .collect();
                    v.push((*gate, dg));
                }
                v
            }
            Op::Sum(input) => vec![(*input, vec![dy[0]; self.tensor(*input).numel()])],
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let scale = dy[0] / targets.len() as f32;
                let mut d = probs.clone();
                for (row, &t) in d.chunks_mut(k).zip(targets) {
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![(*logits, d)]
            }
        }
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
}
