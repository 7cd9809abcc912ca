//! Helpers shared by the integration and acceptance tests: random tensors,
//! conversion of a parameter store into the f64 reference weights, and
//! gradient checks of blocks against central differences of the reference.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use res2wake::model::{Block, BlockKind, BlockSpec, Forward, Init, ParamStore};
use res2wake::tensor::{Graph, Tensor};
use res2wake_refimpl as oracle;
use res2wake_refimpl::Array;

pub const EPS: f32 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f32> {
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| d.sample(rng) as f32).collect()
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, std)).unwrap()
}

pub fn to_array(t: &Tensor) -> Array {
    Array::from_f32(t.shape(), t.data())
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Replaces every parameter with random values (gammas positive) and every
/// running statistic with a random but valid mean/variance.
pub fn randomize_store(store: &mut ParamStore, rng: &mut impl Rng) {
    let names = store.param_names().to_vec();
    for name in &names {
        let p = store.param_mut(name).unwrap();
        let n = p.numel();
        let values: Vec<f32> = if name.ends_with(".gamma") {
            (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            normal_vec(rng, n, 0.1)
        } else {
            // conv kernels are [out, in, kh, kw], linear weights [in, out]
            let fan_in: usize = if p.shape().len() == 4 {
                p.shape()[1..].iter().product()
            } else {
                p.shape()[0]
            };
            normal_vec(rng, n, (2.0 / fan_in.max(1) as f64).sqrt())
        };
        p.data_mut().copy_from_slice(&values);
    }
    let stat_names = store.stat_names().to_vec();
    for name in &stat_names {
        let s = store.stats_mut(name).unwrap();
        let c = s.channels();
        s.mean = normal_vec(rng, c, 0.3);
        s.var = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
    }
}

/// f64 copy of a store's parameters, addressable by name.
#[derive(Clone)]
pub struct ParamsF64 {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl ParamsF64 {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            names: store.param_names().to_vec(),
            shapes: store.params().iter().map(|p| p.shape().to_vec()).collect(),
            values: store.params().iter().map(|p| to_f64(p.data())).collect(),
        }
    }

    fn index(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
    }

    pub fn array(&self, name: &str) -> Array {
        let i = self.index(name);
        Array::new(&self.shapes[i], self.values[i].clone())
    }

    pub fn vec(&self, name: &str) -> Vec<f64> {
        self.values[self.index(name)].clone()
    }

    pub fn has(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values.concat()
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        let mut at = 0;
        for v in &mut out.values {
            let n = v.len();
            v.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        out
    }
}

/// How the reference should normalize: batch moments, or the store's
/// running statistics.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum NormSource {
    Batch,
    Running,
}

pub fn conv_bn(p: &ParamsF64, store: &ParamStore, prefix: &str, stride: usize, norm: NormSource) -> oracle::ConvBn {
    let kernel = p.array(&format!("{prefix}.conv.weight"));
    let pad = kernel.shape[2] / 2;
    let norm = match norm {
        NormSource::Batch => oracle::Norm::Batch,
        NormSource::Running => {
            let s = store.stat(&format!("{prefix}.bn")).unwrap();
            oracle::Norm::Running {
                mean: to_f64(&s.mean),
                var: to_f64(&s.var),
            }
        }
    };
    oracle::ConvBn {
        kernel,
        gamma: p.vec(&format!("{prefix}.bn.gamma")),
        beta: p.vec(&format!("{prefix}.bn.beta")),
        norm,
        stride,
        pad,
    }
}

pub fn se_weights(p: &ParamsF64, prefix: &str) -> oracle::SeWeights {
    oracle::SeWeights {
        w1: p.array(&format!("{prefix}.fc1.weight")),
        b1: p.vec(&format!("{prefix}.fc1.bias")),
        w2: p.array(&format!("{prefix}.fc2.weight")),
        b2: p.vec(&format!("{prefix}.fc2.bias")),
    }
}

pub fn res2net_weights(
    p: &ParamsF64,
    store: &ParamStore,
    prefix: &str,
    spec: &BlockSpec,
    norm: NormSource,
) -> oracle::Res2NetWeights {
    let shortcut_name = format!("{prefix}.shortcut");
    oracle::Res2NetWeights {
        scale: spec.scale,
        reduce: conv_bn(p, store, &format!("{prefix}.reduce"), spec.stride, norm),
        kernels: (0..spec.scale - 1)
            .map(|k| conv_bn(p, store, &format!("{prefix}.kernels.{k}"), 1, norm))
            .collect(),
        expand: conv_bn(p, store, &format!("{prefix}.expand"), 1, norm),
        shortcut: p
            .has(&format!("{shortcut_name}.conv.weight"))
            .then(|| conv_bn(p, store, &shortcut_name, spec.stride, norm)),
        se: (spec.kind == BlockKind::SeRes2Net).then(|| se_weights(p, &format!("{prefix}.se"))),
    }
}

pub fn basic_weights(
    p: &ParamsF64,
    store: &ParamStore,
    prefix: &str,
    spec: &BlockSpec,
    norm: NormSource,
) -> oracle::BasicWeights {
    let shortcut_name = format!("{prefix}.shortcut");
    oracle::BasicWeights {
        conv1: conv_bn(p, store, &format!("{prefix}.conv1"), spec.stride, norm),
        conv2: conv_bn(p, store, &format!("{prefix}.conv2"), 1, norm),
        shortcut: p
            .has(&format!("{shortcut_name}.conv.weight"))
            .then(|| conv_bn(p, store, &shortcut_name, spec.stride, norm)),
    }
}

/// Reference forward of a block built under `prefix`.
pub fn reference_block(
    x: &Array,
    p: &ParamsF64,
    store: &ParamStore,
    prefix: &str,
    spec: &BlockSpec,
    norm: NormSource,
) -> Array {
    match spec.kind {
        BlockKind::Basic => oracle::basic_block(x, &basic_weights(p, store, prefix, spec, norm), EPS as f64),
        BlockKind::Res2Net | BlockKind::SeRes2Net => {
            oracle::res2net_block(x, &res2net_weights(p, store, prefix, spec, norm), EPS as f64)
        }
        BlockKind::Bottleneck => panic!("no reference bottleneck"),
    }
}

pub struct BuiltBlock {
    pub block: Block,
    pub store: ParamStore,
    pub spec: BlockSpec,
}

pub fn build_block(spec: BlockSpec, in_channels: usize, seed: u64) -> BuiltBlock {
    let mut store = ParamStore::new();
    let block = Block::build(&spec, in_channels, &mut store, &mut Init::new(seed), "b").unwrap();
    randomize_store(&mut store, &mut rng(seed ^ 0xabc));
    BuiltBlock { block, store, spec }
}

/// Eval-mode block forward in f32.
pub fn block_eval(b: &BuiltBlock, x: &Tensor) -> Tensor {
    let mut g = Graph::inference();
    let mut f = Forward::eval(&mut g, &b.store, EPS);
    let xi = f.graph().leaf(x.clone());
    let y = b.block.forward(&mut f, xi).unwrap();
    g.take_tensor(y)
}

/// Outcome of a block gradient check.
#[derive(Debug, Clone, Copy)]
pub struct BlockGrad {
    pub input_error: f64,
    pub param_error: f64,
    /// Coordinates left out because a ±h probe crossed a ReLU kink.
    pub excluded: usize,
    pub total: usize,
}

impl BlockGrad {
    pub fn error(&self) -> f64 {
        self.input_error.max(self.param_error)
    }

    pub fn excluded_fraction(&self) -> f64 {
        self.excluded as f64 / self.total as f64
    }
}

fn masked_error(analytic: &[f64], numeric: &[f64], kinked: &[bool]) -> f64 {
    let keep = |v: &[f64]| -> Vec<f64> { v.iter().zip(kinked).filter(|(_, &k)| !k).map(|(x, _)| *x).collect() };
    oracle::relative_error(&keep(analytic), &keep(numeric), 1e-6)
}

/// Analytic gradients (f32, training-mode batch norm) of `sum(r * block(x))`
/// with respect to the input and every parameter, against central
/// differences of the f64 reference. Coordinates whose difference probes
/// straddle a ReLU kink are not differentiable at that step and are left out.
pub fn block_grad_check(b: &mut BuiltBlock, x: &Tensor, r: &Tensor, h: f64) -> BlockGrad {
    let mut g = Graph::new();
    let (xi, y, leaves) = {
        let mut f = Forward::train(&mut g, &mut b.store, 0.1, EPS);
        let xi = f.graph().param(x.clone());
        let y = b.block.forward(&mut f, xi).unwrap();
        (xi, y, f.leaves().to_vec())
    };
    let ri = g.leaf(r.clone());
    let prod = g.mul(y, ri).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let gx = to_f64(g.grad(xi).unwrap());
    let gp: Vec<f64> = leaves
        .iter()
        .flat_map(|&id| {
            let n = g.tensor(id).numel();
            g.grad(id).map_or_else(|| vec![0.0; n], to_f64)
        })
        .collect();

    let params = ParamsF64::from_store(&b.store);
    let xa = to_array(x);
    let rv = to_f64(r.data());
    let dot = |a: &Array| a.data.iter().zip(&rv).map(|(a, b)| a * b).sum::<f64>();
    let store = b.store.clone();
    let spec = b.spec;
    let (num_x, kink_x) = oracle::central_difference_kinks(&xa.data, h, |xs| {
        let probe = Array::new(&xa.shape, xs.to_vec());
        dot(&reference_block(&probe, &params, &store, "b", &spec, NormSource::Batch))
    });
    let (num_p, kink_p) = oracle::central_difference_kinks(&params.flat(), h, |flat| {
        dot(&reference_block(
            &xa,
            &params.with_flat(flat),
            &store,
            "b",
            &spec,
            NormSource::Batch,
        ))
    });
    let excluded = kink_x.iter().chain(&kink_p).filter(|&&k| k).count();
    BlockGrad {
        input_error: masked_error(&gx, &num_x, &kink_x),
        param_error: masked_error(&gp, &num_p, &kink_p),
        excluded,
        total: kink_x.len() + kink_p.len(),
    }
}

/// Checks the gradient of `sum(r * op(inputs))` with respect to every input
/// against central differences of the f64 `reference`. Returns the worst
/// norm-relative error over the inputs.
pub fn op_grad_check(
    inputs: &[Tensor],
    seed: u64,
    h: f64,
    build: impl Fn(&mut Graph, &[res2wake::tensor::TensorId]) -> res2wake::tensor::TensorId,
    reference: impl Fn(&[Array]) -> Array,
) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &ids);
    let r = rand_tensor(&mut rng(seed ^ 0x5eed), g.shape(y), 1.0);
    let ri = g.leaf(r.clone());
    let prod = g.mul(y, ri).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();

    let arrays: Vec<Array> = inputs.iter().map(to_array).collect();
    let rv = to_f64(r.data());
    let mut worst = 0.0f64;
    for (k, id) in ids.iter().enumerate() {
        let analytic = to_f64(g.grad(*id).unwrap());
        let numeric = oracle::central_difference(&arrays[k].data, h, |v| {
            let mut probe = arrays.clone();
            probe[k].data.copy_from_slice(v);
            reference(&probe).data.iter().zip(&rv).map(|(a, b)| a * b).sum()
        });
        worst = worst.max(oracle::relative_error(&analytic, &numeric, 1e-6));
    }
    worst
}

/// Distinct values spaced at least `gap` apart, shuffled, so kinks of
/// ReLU and max pooling stay well outside the difference step.
pub fn spaced_tensor(rng: &mut impl Rng, shape: &[usize], gap: f32) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0 + 0.5) * gap).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Gradient check of every differentiable graph op for one seed, as
/// `(op, relative error)` pairs.
pub fn op_grad_cases(seed: u64) -> Vec<(&'static str, f64)> {
    use res2wake::tensor::BatchNormMode;
    let mut r = rng(seed);
    let h = 1e-3;
    let mut out = Vec::new();

    let (x, k, b) = (
        rand_tensor(&mut r, &[2, 3, 5, 6], 1.0),
        rand_tensor(&mut r, &[4, 3, 3, 3], 0.5),
        rand_tensor(&mut r, &[4], 0.5),
    );
    out.push((
        "conv2d",
        op_grad_check(
            &[x, k, b],
            seed,
            h,
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap(),
            |a| oracle::conv2d(&a[0], &a[1], Some(&a[2].data), 2, 1),
        ),
    ));

    let x = rand_tensor(&mut r, &[3, 4, 3, 2], 1.5);
    let gamma = Tensor::new(vec![4], (0..4).map(|_| r.gen_range(0.5..1.5)).collect()).unwrap();
    let beta = rand_tensor(&mut r, &[4], 0.3);
    out.push((
        "batch_norm",
        op_grad_check(
            &[x, gamma, beta],
            seed,
            h,
            |g, v| {
                let mut stats = res2wake::tensor::RunningStats::identity(4);
                let mode = BatchNormMode::Train {
                    stats: &mut stats,
                    momentum: 0.1,
                };
                g.batch_norm(v[0], v[1], v[2], mode, EPS).unwrap()
            },
            |a| oracle::batch_norm(&a[0], &a[1].data, &a[2].data, &oracle::Norm::Batch, EPS as f64),
        ),
    ));

    let x = spaced_tensor(&mut r, &[2, 3, 4, 4], 0.05);
    out.push((
        "relu",
        op_grad_check(&[x], seed, h, |g, v| g.relu(v[0]), |a| oracle::relu(&a[0])),
    ));

    let x = rand_tensor(&mut r, &[2, 3, 4], 2.0);
    out.push((
        "sigmoid",
        op_grad_check(&[x], seed, h, |g, v| g.sigmoid(v[0]), |a| oracle::sigmoid(&a[0])),
    ));

    let x = rand_tensor(&mut r, &[4, 5], 2.0);
    out.push((
        "softmax",
        op_grad_check(&[x], seed, h, |g, v| g.softmax(v[0]), |a| oracle::softmax_rows(&a[0])),
    ));

    let x = spaced_tensor(&mut r, &[2, 2, 7, 6], 0.05);
    out.push((
        "max_pool2d",
        op_grad_check(
            &[x],
            seed,
            h,
            |g, v| g.max_pool2d(v[0], 3, 2, 1).unwrap(),
            |a| oracle::max_pool2d(&a[0], 3, 2, 1),
        ),
    ));

    let x = rand_tensor(&mut r, &[3, 4, 3, 5], 1.0);
    out.push((
        "global_avg_pool",
        op_grad_check(
            &[x],
            seed,
            h,
            |g, v| g.global_avg_pool(v[0]).unwrap(),
            |a| oracle::global_avg_pool(&a[0]),
        ),
    ));

    let (x, w, b) = (
        rand_tensor(&mut r, &[3, 6], 1.0),
        rand_tensor(&mut r, &[6, 4], 0.5),
        rand_tensor(&mut r, &[4], 0.5),
    );
    out.push((
        "linear",
        op_grad_check(
            &[x, w, b],
            seed,
            h,
            |g, v| g.linear(v[0], v[1], v[2]).unwrap(),
            |a| oracle::linear(&a[0], &a[1], &a[2].data),
        ),
    ));

    // split into four groups and reassemble them in a different order
    let x = rand_tensor(&mut r, &[2, 8, 3, 3], 1.0);
    out.push((
        "split/concat",
        op_grad_check(
            &[x],
            seed,
            h,
            |g, v| {
                let p = g.split_channels(v[0], 4).unwrap();
                g.concat_channels(&[p[2], p[0], p[3], p[1]]).unwrap()
            },
            |a| {
                let p = oracle::split_channels(&a[0], 4);
                oracle::concat_channels(&[p[2].clone(), p[0].clone(), p[3].clone(), p[1].clone()])
            },
        ),
    ));

    let (a0, b0) = (
        rand_tensor(&mut r, &[2, 3, 4], 1.0),
        rand_tensor(&mut r, &[2, 3, 4], 1.0),
    );
    out.push((
        "add",
        op_grad_check(
            &[a0.clone(), b0.clone()],
            seed,
            h,
            |g, v| g.add(v[0], v[1]).unwrap(),
            |a| oracle::add(&a[0], &a[1]),
        ),
    ));
    out.push((
        "mul",
        op_grad_check(
            &[a0, b0],
            seed,
            h,
            |g, v| g.mul(v[0], v[1]).unwrap(),
            |a| {
                Array::new(
                    &a[0].shape,
                    a[0].data.iter().zip(&a[1].data).map(|(x, y)| x * y).collect(),
                )
            },
        ),
    ));

    let (x, gate) = (
        rand_tensor(&mut r, &[2, 3, 4, 2], 1.0),
        rand_tensor(&mut r, &[2, 3], 1.0),
    );
    out.push((
        "scale_channels",
        op_grad_check(
            &[x, gate],
            seed,
            h,
            |g, v| g.scale_channels(v[0], v[1]).unwrap(),
            |a| {
                let hw = a[0].shape[2] * a[0].shape[3];
                let data = a[0]
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * a[1].data[i / hw])
                    .collect();
                Array::new(&a[0].shape, data)
            },
        ),
    ));

    let logits = rand_tensor(&mut r, &[5, 3], 2.0);
    let targets: Vec<usize> = (0..5).map(|_| r.gen_range(0..3)).collect();
    let t2 = targets.clone();
    out.push((
        "cross_entropy",
        op_grad_check(
            &[logits],
            seed,
            h,
            move |g, v| g.cross_entropy(v[0], &targets).unwrap(),
            move |a| {
                let p = oracle::softmax_rows(&a[0]);
                let k = a[0].shape[1];
                let loss = t2
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| -p.data[i * k + t].ln())
                    .sum::<f64>()
                    / t2.len() as f64;
                Array::new(&[1], vec![loss])
            },
        ),
    ));
    out
}

/// Block-level gradient checks (input and all parameters) for one seed.
pub fn block_grad_cases(seed: u64) -> Vec<(&'static str, BlockGrad)> {
    let mut r = rng(seed ^ 0xb10c);
    let mut out = Vec::new();
    // w = 4 gives 8 inner and 16 output channels, enough for r = 16
    let cases: [(&'static str, BlockSpec, usize); 3] = [
        (
            "se-res2net block",
            BlockSpec::new(BlockKind::SeRes2Net, 4).with_stride(2),
            8,
        ),
        ("res2net block", BlockSpec::new(BlockKind::Res2Net, 4), 16),
        ("basic block", BlockSpec::new(BlockKind::Basic, 4).with_stride(2), 3),
    ];
    for (name, spec, cin) in cases {
        let mut b = build_block(spec, cin, seed);
        let x = rand_tensor(&mut r, &[2, cin, 4, 3], 1.0);
        let rr = rand_tensor(&mut r, block_eval(&b, &x).shape(), 1.0);
        out.push((name, block_grad_check(&mut b, &x, &rr, 1e-3)));
    }
    out
}

pub fn max_rel_error(a: &[f32], b: &[f64]) -> f64 {
    oracle::relative_error(&to_f64(a), b, 1e-12)
}

/// Res2Net blocks (eval mode, random weights and running statistics)
/// against the reference, one case per (seed, scale, width). Cycles through
/// plain and SE blocks, with and without projection shortcuts.
pub fn eq3_cases(n: usize) -> Vec<(String, f64)> {
    let scales = [2, 3, 4, 5, 6];
    let widths = [4, 8, 12];
    (0..n)
        .map(|i| {
            let seed = 1000 + i as u64;
            let mut r = rng(seed);
            let scale = scales[i % scales.len()];
            let width = widths[(i / scales.len()) % widths.len()];
            let se = i % 2 == 1;
            let kind = if se { BlockKind::SeRes2Net } else { BlockKind::Res2Net };
            let stride = 1 + (i % 3 == 0) as usize;
            let group = r.gen_range(1..=3);
            let spec = BlockSpec::new(kind, width)
                .with_scale(scale)
                .with_group_width(group)
                .with_stride(stride)
                .with_se_reduction(4);
            let cin = if i % 4 == 2 {
                spec.out_channels()
            } else {
                r.gen_range(2..10)
            };
            let b = build_block(spec, cin, seed);
            let (h, w) = (r.gen_range(3..8), r.gen_range(3..8));
            let x = rand_tensor(&mut r, &[2, cin, h, w], 1.0);
            let y = block_eval(&b, &x);
            let p = ParamsF64::from_store(&b.store);
            let want = reference_block(&to_array(&x), &p, &b.store, "b", &spec, NormSource::Running);
            assert_eq!(y.shape(), &want.shape[..]);
            let desc = format!("seed {seed} s={scale} w={width} group={group} {kind:?} stride {stride} cin {cin}");
            (desc, max_rel_error(y.data(), &want.data))
        })
        .collect()
}

/// Random spectrogram resized along time against the align-corners oracle
/// applied band by band. Returns the worst relative error over `n` cases.
pub fn resize_cases(n: usize, seed: u64) -> f64 {
    use res2wake::dsp::{bilinear_resize, Spectrogram};
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (bands, frames, target) = (r.gen_range(1..12), r.gen_range(2..300), r.gen_range(2..300));
        let vals = normal_vec(&mut r, bands * frames, 3.0);
        let s = Spectrogram::new(bands, frames, vals, 0.01).unwrap();
        let got = bilinear_resize(&s, target).unwrap();
        let want: Vec<f64> = (0..bands)
            .flat_map(|b| oracle::align_corners_linear(&to_f64(s.band(b)), target))
            .collect();
        worst = worst.max(max_rel_error(got.values(), &want));
    }
    worst
}

/// Equal-size resize returns every value bit for bit.
pub fn resize_identity_exact(n: usize, seed: u64) -> bool {
    use res2wake::dsp::{bilinear_resize, Spectrogram};
    let mut r = rng(seed);
    (0..n).all(|_| {
        let (bands, frames) = (r.gen_range(1..12), r.gen_range(2..300));
        let s = Spectrogram::new(bands, frames, normal_vec(&mut r, bands * frames, 3.0), 0.01).unwrap();
        let out = bilinear_resize(&s, frames).unwrap();
        out.values()
            .iter()
            .zip(s.values())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    })
}

/// Checks window starts for one (frames, W, s): they equal the closed form
/// {k·step ≤ F−W} ∪ {F−W}, strictly increase, and cover every frame.
pub fn slicing_case(frames: usize, window: usize, step_fraction: f64) -> Result<(), String> {
    use res2wake::dsp::{slice_starts, SliceConfig};
    let cfg = SliceConfig::new(window, step_fraction).map_err(|e| e.to_string())?;
    let step = cfg.step();
    if step != ((window as f64 * step_fraction).round() as usize).max(1) {
        return Err(format!("step {step} for W={window} s={step_fraction}"));
    }
    let starts = slice_starts(frames, &cfg).map_err(|e| e.to_string())?;
    let want = oracle::slice_starts(frames, window, step);
    if starts != want {
        return Err(format!(
            "F={frames} W={window} s={step_fraction}: got {starts:?}, want {want:?}"
        ));
    }
    if starts.windows(2).any(|w| w[0] >= w[1]) {
        return Err("starts not increasing".into());
    }
    let mut covered = vec![false; frames];
    for &s in &starts {
        covered[s..s + window].iter_mut().for_each(|c| *c = true);
    }
    if !covered.iter().all(|&c| c) || starts.last() != Some(&(frames - window)) {
        return Err(format!("F={frames} W={window} s={step_fraction}: frames not covered"));
    }
    Ok(())
}

/// The 1000-case (frames, W, s) grid: 10 windows × 10 step fractions ×
/// 10 frame counts from W up to a few windows long.
pub fn slicing_grid() -> Vec<(usize, usize, f64)> {
    let windows = [2, 3, 7, 10, 25, 50, 64, 99, 100, 150];
    let fractions = [0.05, 0.1, 0.2, 0.25, 0.3, 1.0 / 3.0, 0.5, 0.6, 0.75, 0.95];
    let mut out = Vec::with_capacity(1000);
    for &w in &windows {
        for &s in &fractions {
            for k in 0..10usize {
                out.push((w + k * k * w / 7 + k, w, s));
            }
        }
    }
    out
}

/// Local stub: a window's score is its first frame's band-0 value.
pub fn first_frame_scorer() -> res2wake::stream::FnScorer<impl Fn(&res2wake::dsp::Spectrogram) -> f32 + Sync> {
    res2wake::stream::FnScorer(|s: &res2wake::dsp::Spectrogram| s.get(0, 0))
}

/// Global stub: mean of band 1 over the (resized) span, squashed into (0, 1),
/// so it depends on every buffered frame of the span.
pub fn span_mean_scorer() -> res2wake::stream::FnScorer<impl Fn(&res2wake::dsp::Spectrogram) -> f32 + Sync> {
    res2wake::stream::FnScorer(|s: &res2wake::dsp::Spectrogram| {
        let b = s.band(1);
        let m = b.iter().map(|&v| v as f64).sum::<f64>() / b.len() as f64;
        (1.0 / (1.0 + (-4.0 * (m - 0.5)).exp())) as f32
    })
}

/// A random two-band stub stream with bursts of high band-0 values so runs
/// of trigger points occur, plus a random detector configuration.
pub fn stub_stream(seed: u64) -> (res2wake::dsp::Spectrogram, res2wake::stream::DetectorConfig) {
    use res2wake::dsp::{SliceConfig, Spectrogram};
    use res2wake::stream::DetectorConfig;
    let mut r = rng(seed);
    let window = r.gen_range(4..120);
    let cfg = DetectorConfig {
        threshold: r.gen_range(0.3..0.8),
        final_threshold: r.gen_bool(0.5).then(|| r.gen_range(0.0..0.9)),
        slice: SliceConfig::new(window, r.gen_range(0.05..0.95)).unwrap(),
        resize_frames: r.gen_range(2..60),
        refractory_frames: r.gen_range(0..300),
        pad_value: -1.0,
        score_batch: r.gen_range(1..20),
    };
    let frames = r.gen_range(1..3000);
    let mut band0 = Vec::with_capacity(frames);
    let mut hot = false;
    for _ in 0..frames {
        if r.gen_bool(0.02) {
            hot = !hot;
        }
        band0.push(if hot {
            r.gen_range(0.4..1.0)
        } else {
            r.gen_range(0.0..0.6)
        });
    }
    let band1: Vec<f32> = (0..frames).map(|_| r.gen_range(0.0..1.0)).collect();
    let spec = Spectrogram::new(2, frames, [band0, band1].concat(), 0.01).unwrap();
    (spec, cfg)
}

/// Offline detection vs the incremental detector fed in random chunks.
pub fn streaming_equivalence_case(seed: u64) -> Result<usize, String> {
    use res2wake::stream::{detect_spectrogram, StreamDetector};
    let (spec, cfg) = stub_stream(seed);
    let (m0, m1) = (span_mean_scorer(), first_frame_scorer());
    let offline = detect_spectrogram(&spec, &cfg, &m0, &m1).map_err(|e| e.to_string())?;
    let mut r = rng(seed ^ 0xc4u64);
    let mut d = StreamDetector::new(cfg, 2, &m0, &m1).map_err(|e| e.to_string())?;
    let mut online = Vec::new();
    let mut at = 0;
    while at < spec.frames() {
        let end = (at + r.gen_range(1..400)).min(spec.frames());
        online.extend(d.push_frames(&spec.crop(at, end).unwrap()).map_err(|e| e.to_string())?);
        at = end;
    }
    online.extend(d.flush().map_err(|e| e.to_string())?);
    if online != offline {
        return Err(format!("seed {seed}: streaming {online:?} != offline {offline:?}"));
    }
    Ok(offline.len())
}

/// One band whose value at each slice start is that slice's score (default
/// W = 100, step 30), pushed through the streaming detector with a constant
/// global score.
pub fn run_fixture(scores: &[f32], m0: f32) -> Vec<res2wake::stream::DetectionEvent> {
    use res2wake::dsp::Spectrogram;
    use res2wake::stream::{DetectorConfig, FnScorer, StreamDetector};
    let cfg = DetectorConfig::default();
    let step = cfg.slice.step();
    let frames = (scores.len() - 1) * step + cfg.slice.window_frames;
    let mut v = vec![0.0f32; frames];
    for (i, &s) in scores.iter().enumerate() {
        v[i * step] = s;
    }
    let spec = Spectrogram::new(1, frames, v, 0.01).unwrap();
    let g = FnScorer(move |_: &Spectrogram| m0);
    let l = first_frame_scorer();
    let mut d = StreamDetector::new(cfg, 1, &g, &l).unwrap();
    let mut ev = d.push_frames(&spec).unwrap();
    ev.extend(d.flush().unwrap());
    ev
}

/// The three trigger-rule examples, as (name, passed).
pub fn trigger_fixtures() -> Vec<(&'static str, bool)> {
    let ev = run_fixture(&[0.2, 0.9, 0.95, 0.3], 0.85);
    let run_of_two = ev.len() == 1
        && ev[0].y_m1 == 0.95
        && (ev[0].y_f - 0.90).abs() < 1e-6
        && (ev[0].span_start_frame, ev[0].span_end_frame) == (30, 160);

    let singletons = run_fixture(&[0.9, 0.2, 0.9, 0.2], 1.0).is_empty();

    // first run's span is [0, 130); the second starts 50 frames (0.5 s)
    // after it ends and is ignored, a third starting 110 frames after fires
    let hi = 0.9;
    let lo = 0.1;
    let close = run_fixture(&[hi, hi, lo, lo, lo, lo, hi, hi, lo], 0.9);
    let far = run_fixture(&[hi, hi, lo, lo, lo, lo, lo, lo, hi, hi, lo], 0.9);
    let refractory =
        close.len() == 1 && close[0].span_start_frame == 0 && far.len() == 2 && far[1].span_start_frame == 240;

    vec![
        ("run of two", run_of_two),
        ("singleton rejection", singletons),
        ("1 s refractory", refractory),
    ]
}

/// Random labelled candidate sets for DET sweeps.
pub fn random_candidates(seed: u64) -> Vec<res2wake::eval::UtteranceCandidates> {
    use res2wake::data::Label;
    use res2wake::eval::UtteranceCandidates;
    use res2wake::stream::Candidate;
    let mut r = rng(seed);
    let n = r.gen_range(2..40);
    (0..n)
        .map(|i| {
            let label = if i == 0 {
                Label::Positive
            } else if i == 1 {
                Label::Negative
            } else if r.gen_bool(0.5) {
                Label::Positive
            } else {
                Label::Negative
            };
            let mut at = 0;
            let candidates = (0..r.gen_range(0..8))
                .map(|_| {
                    at += r.gen_range(30..300);
                    let len = r.gen_range(130..400);
                    let c = Candidate {
                        span_start_frame: at,
                        span_end_frame: at + len,
                        y_m1: r.gen_range(0.3..1.0),
                    };
                    at += len / 2;
                    (c, r.gen_range(0.0..1.0))
                })
                .collect();
            UtteranceCandidates {
                label,
                duration_s: r.gen_range(1.0..600.0),
                candidates,
            }
        })
        .collect()
}

/// save → load → forward on a random batch; true iff logits and every
/// stored value come back bit for bit.
pub fn archive_round_trip(arch: res2wake::model::Arch, dir: &std::path::Path) -> Result<(), String> {
    use res2wake::model::{load_weights, save_weights, Model, ModelConfig};
    let cfg = ModelConfig::from_arch(arch);
    let mut model = Model::build(&cfg, 11).map_err(|e| e.to_string())?;
    randomize_store(model.store_mut(), &mut rng(12));
    let path = dir.join(format!("{arch}.wwa"));
    save_weights(&model, &path).map_err(|e| e.to_string())?;
    let back = load_weights(&path, &cfg).map_err(|e| e.to_string())?;
    let x = rand_tensor(&mut rng(13), &[3, 1, 40, 100], 3.0);
    let a = model.logits(x.clone()).map_err(|e| e.to_string())?;
    let b = back.logits(x).map_err(|e| e.to_string())?;
    let bits = |t: &[f32]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    if bits(a.data()) != bits(b.data()) {
        return Err(format!("{arch}: logits differ"));
    }
    let same_params = model
        .store()
        .params()
        .iter()
        .zip(back.store().params())
        .all(|(p, q)| bits(p.data()) == bits(q.data()));
    let same_stats = model
        .store()
        .stats()
        .iter()
        .zip(back.store().stats())
        .all(|(p, q)| bits(&p.mean) == bits(&q.mean) && bits(&p.var) == bits(&q.var));
    if !(same_params && same_stats) {
        return Err(format!("{arch}: stored values differ"));
    }
    Ok(())
}
