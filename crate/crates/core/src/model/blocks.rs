use crate::tensor::{Graph, Tensor, TensorId};

use super::{BlockKind, BlockSpec, Forward, Init, ModelError, ParamId, ParamStore, Result, StatsId};

/// Convolution (no bias) followed by batch norm. No activation.
#[derive(Debug, Clone)]
pub struct ConvBn {
    kernel: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: StatsId,
    stride: usize,
    pad: usize,
}

impl ConvBn {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let w = init.he_normal(
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
        );
        Self {
            kernel: store.add(format!("{prefix}.conv.weight"), w),
            gamma: store.add(format!("{prefix}.bn.gamma"), Tensor::full([out_channels], 1.0)),
            beta: store.add(format!("{prefix}.bn.beta"), Tensor::zeros([out_channels])),
            stats: store.add_stats(format!("{prefix}.bn"), out_channels),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: TensorId) -> Result<TensorId> {
        let k = f.param(self.kernel);
        let y = f.graph().conv2d(x, k, None, self.stride, self.pad)?;
        f.batch_norm(y, self.gamma, self.beta, self.stats)
    }

    fn forward_relu(&self, f: &mut Forward, x: TensorId) -> Result<TensorId> {
        let y = self.forward(f, x)?;
        Ok(f.graph().relu(y))
    }
}

/// Squeeze-and-excitation: global average pool, FC down by `r`, ReLU, FC
/// back up, sigmoid, then per-channel scaling of the input.
#[derive(Debug, Clone)]
pub struct SeLayer {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl SeLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(ModelError::Config(format!(
                "SE reduction {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            w1: store.add(
                format!("{prefix}.fc1.weight"),
                init.he_normal(&[channels, hidden], channels),
            ),
            b1: store.add(format!("{prefix}.fc1.bias"), Tensor::zeros([hidden])),
            w2: store.add(
                format!("{prefix}.fc2.weight"),
                init.he_normal(&[hidden, channels], hidden),
            ),
            b2: store.add(format!("{prefix}.fc2.bias"), Tensor::zeros([channels])),
        })
    }

    pub fn forward(&self, f: &mut Forward, x: TensorId) -> Result<TensorId> {
        let (w1, b1, w2, b2) = (f.param(self.w1), f.param(self.b1), f.param(self.w2), f.param(self.b2));
        let g = f.graph();
        let squeezed = g.global_avg_pool(x)?;
        let h = g.linear(squeezed, w1, b1)?;
        let h = g.relu(h);
        let e = g.linear(h, w2, b2)?;
        let gate = g.sigmoid(e);
        Ok(g.scale_channels(x, gate)?)
    }
}

/// The hierarchical residual connection inside a Res2Net block.
///
/// With groups `x_1..x_s` (1-based, as `kernel` receives them):
/// `y_1 = x_1`, `y_2 = K_2(x_2)`, `y_i = K_i(x_i + y_{i-1})` for `i > 2`.
pub fn multi_scale_hierarchy<C: AsMut<Graph>>(
    ctx: &mut C,
    groups: &[TensorId],
    mut kernel: impl FnMut(&mut C, usize, TensorId) -> Result<TensorId>,
) -> Result<Vec<TensorId>> {
    let mut out = Vec::with_capacity(groups.len());
    let Some((&first, rest)) = groups.split_first() else {
        return Ok(out);
    };
    out.push(first);
    let mut prev: Option<TensorId> = None;
    for (j, &x) in rest.iter().enumerate() {
        let i = j + 2;
        let input = match prev {
            None => x,
            Some(p) => ctx.as_mut().add(x, p)?,
        };
        let y = kernel(ctx, i, input)?;
        out.push(y);
        prev = Some(y);
    }
    Ok(out)
}

fn shortcut(
    store: &mut ParamStore,
    init: &mut Init,
    prefix: &str,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
) -> Option<ConvBn> {
    (stride != 1 || in_channels != out_channels).then(|| {
        ConvBn::new(
            store,
            init,
            &format!("{prefix}.shortcut"),
            in_channels,
            out_channels,
            1,
            stride,
        )
    })
}

fn residual_out(f: &mut Forward, body: TensorId, sc: &Option<ConvBn>, x: TensorId) -> Result<TensorId> {
    let skip = match sc {
        Some(s) => s.forward(f, x)?,
        None => x,
    };
    let g = f.graph();
    let sum = g.add(body, skip)?;
    Ok(g.relu(sum))
}

/// Two 3x3 convs.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn forward(&self, f: &mut Forward, x: TensorId) -> Result<TensorId> {
        let h = self.conv1.forward_relu(f, x)?;
        let h = self.conv2.forward(f, h)?;
        residual_out(f, h, &self.shortcut, x)
    }
}

/// 1x1 reduce, 3x3, 1x1 expand.
#[derive(Debug, Clone)]
pub struct BottleneckBlock {
    reduce: ConvBn,
    conv: ConvBn,
    expand: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BottleneckBlock {
    fn forward(&self, f: &mut Forward, x: TensorId) -> Result<TensorId> {
        let h = self.reduce.forward_relu(f, x)?;
        let h = self.conv.forward_relu(f, h)?;
        let h = self.expand.forward(f, h)?;
        residual_out(f, h, &self.shortcut, x)
    }
}

/// Bottleneck whose 3x3 stage is replaced by the multi-scale hierarchy,
/// optionally followed by squeeze-and-excitation before the shortcut add.
#[derive(Debug, Clone)]
pub struct Res2NetBlock {
    scale: usize,
    reduce: ConvBn,
    kernels: Vec<ConvBn>,
    expand: ConvBn,
    se: Option<SeLayer>,
    shortcut: Option<ConvBn>,
}

impl Res2NetBlock {
    pub fn scale(&self) -> usize {
        self.scale
    }

    fn forward(&self, f: &mut Forward, x: TensorId) -> Result<TensorId> {
        let h = self.reduce.forward_relu(f, x)?;
        let groups = f.graph().split_channels(h, self.scale)?;
        let ys = multi_scale_hierarchy(f, &groups, |f, i, t| self.kernels[i - 2].forward_relu(f, t))?;
        let cat = f.graph().concat_channels(&ys)?;
        let mut h = self.expand.forward(f, cat)?;
        if let Some(se) = &self.se {
            h = se.forward(f, h)?;
        }
        residual_out(f, h, &self.shortcut, x)
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Basic(BasicBlock),
    Bottleneck(BottleneckBlock),
    Res2Net(Res2NetBlock),
}

impl Block {
    /// Registers the block's parameters under `prefix`. Parameter names:
    /// `<prefix>.{conv1,conv2,reduce,conv,kernels.<k>,expand,shortcut}.conv.weight`,
    /// matching `.bn.{gamma,beta}`, and `<prefix>.se.fc{1,2}.{weight,bias}`.
    pub fn build(
        spec: &BlockSpec,
        in_channels: usize,
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
    ) -> Result<Self> {
        spec.validate()?;
        let out = spec.out_channels();
        let inner = spec.inner_channels();
        let name = |part: &str| format!("{prefix}.{part}");
        Ok(match spec.kind {
            BlockKind::Basic => Block::Basic(BasicBlock {
                conv1: ConvBn::new(store, init, &name("conv1"), in_channels, out, 3, spec.stride),
                conv2: ConvBn::new(store, init, &name("conv2"), out, out, 3, 1),
                shortcut: shortcut(store, init, prefix, in_channels, out, spec.stride),
            }),
            BlockKind::Bottleneck => Block::Bottleneck(BottleneckBlock {
                reduce: ConvBn::new(store, init, &name("reduce"), in_channels, inner, 1, spec.stride),
                conv: ConvBn::new(store, init, &name("conv"), inner, inner, 3, 1),
                expand: ConvBn::new(store, init, &name("expand"), inner, out, 1, 1),
                shortcut: shortcut(store, init, prefix, in_channels, out, spec.stride),
            }),
            BlockKind::Res2Net | BlockKind::SeRes2Net => {
                if !inner.is_multiple_of(spec.scale) {
                    return Err(ModelError::Config(format!(
                        "{inner} channels cannot be split into {} groups",
                        spec.scale
                    )));
                }
                let gw = inner / spec.scale;
                let reduce = ConvBn::new(store, init, &name("reduce"), in_channels, inner, 1, spec.stride);
                let kernels = (0..spec.scale - 1)
                    .map(|k| ConvBn::new(store, init, &name(&format!("kernels.{k}")), gw, gw, 3, 1))
                    .collect();
                let expand = ConvBn::new(store, init, &name("expand"), inner, out, 1, 1);
                let se = match spec.kind {
                    BlockKind::SeRes2Net => Some(SeLayer::new(store, init, &name("se"), out, spec.se_reduction)?),
                    _ => None,
                };
                Block::Res2Net(Res2NetBlock {
                    scale: spec.scale,
                    reduce,
                    kernels,
                    expand,
                    se,
                    shortcut: shortcut(store, init, prefix, in_channels, out, spec.stride),
                })
            }
        })
    }

    pub fn forward(&self, f: &mut Forward, x: TensorId) -> Result<TensorId> {
        match self {
            Block::Basic(b) => b.forward(f, x),
            Block::Bottleneck(b) => b.forward(f, x),
            Block::Res2Net(b) => b.forward(f, x),
        }
    }
}
