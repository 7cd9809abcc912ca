//! Straight-line `f64` reference kernels.
//!
//! Everything here is written as directly as possible (nested loops, no
//! im2col, no fused paths) so it can serve as an independent oracle for the
//! optimized `f32` implementation in `res2wake`.

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Self::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let s = &self.shape;
        self.data[((n * s[1] + c) * s[2] + h) * s[3] + w]
    }
}

/// Direct 7-deep loop cross-correlation with zero padding.
pub fn conv2d(x: &Array, k: &Array, bias: Option<&[f64]>, stride: usize, pad: usize) -> Array {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, kc, kh, kw) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
    assert_eq!(c, kc);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Array::zeros(&[n, o, ho, wo]);
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.at4(b, ic, iy as usize, ix as usize) * k.at4(oc, ic, ky, kx);
                            }
                        }
                    }
                    out.data[((b * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Which statistics a reference batch norm normalizes with.
#[derive(Debug, Clone)]
pub enum Norm {
    /// Biased per-channel moments of the current batch.
    Batch,
    Running {
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

pub fn batch_norm(x: &Array, gamma: &[f64], beta: &[f64], norm: &Norm, eps: f64) -> Array {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = x.clone();
    for ch in 0..c {
        let (mean, var) = match norm {
            Norm::Batch => {
                let mut vals = Vec::new();
                for b in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            vals.push(x.at4(b, ch, y, xx));
                        }
                    }
                }
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
                (m, v)
            }
            Norm::Running { mean, var } => (mean[ch], var[ch]),
        };
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let i = ((b * c + ch) * h + y) * w + xx;
                    out.data[i] = gamma[ch] * (x.data[i] - mean) / (var + eps).sqrt() + beta[ch];
                }
            }
        }
    }
    out
}

thread_local! {
    static RELU_TRACE: std::cell::RefCell<Option<Vec<bool>>> = const { std::cell::RefCell::new(None) };
}

/// Runs `f`, recording the sign of every ReLU input it evaluates. Finite
/// differences whose probes disagree on this pattern straddle a kink.
pub fn trace_relu_signs<R>(f: impl FnOnce() -> R) -> (R, Vec<bool>) {
    RELU_TRACE.with(|t| *t.borrow_mut() = Some(Vec::new()));
    let out = f();
    let signs = RELU_TRACE.with(|t| t.borrow_mut().take()).unwrap_or_default();
    (out, signs)
}

pub fn relu(x: &Array) -> Array {
    RELU_TRACE.with(|t| {
        if let Some(signs) = t.borrow_mut().as_mut() {
            signs.extend(x.data.iter().map(|&v| v > 0.0));
        }
    });
    Array::new(&x.shape, x.data.iter().map(|&v| v.max(0.0)).collect())
}

pub fn sigmoid(x: &Array) -> Array {
    Array::new(&x.shape, x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect())
}

pub fn add(a: &Array, b: &Array) -> Array {
    assert_eq!(a.shape, b.shape);
    Array::new(&a.shape, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

pub fn softmax_rows(x: &Array) -> Array {
    let k = *x.shape.last().unwrap();
    let mut out = x.clone();
    for row in out.data.chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - max).exp() / sum;
        }
    }
    out
}

pub fn max_pool2d(x: &Array, size: usize, stride: usize, pad: usize) -> Array {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let ho = (h + 2 * pad - size) / stride + 1;
    let wo = (w + 2 * pad - size) / stride + 1;
    let mut out = Array::zeros(&[n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..size {
                        for kx in 0..size {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                best = best.max(x.at4(b, ch, iy as usize, ix as usize));
                            }
                        }
                    }
                    out.data[((b * c + ch) * ho + oy) * wo + ox] = best;
                }
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &Array) -> Array {
    let (n, c, hw) = (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]);
    let data = x.data.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Array::new(&[n, c], data)
}

/// `x[N,F] · w[F,O] + b[O]`.
pub fn linear(x: &Array, w: &Array, b: &[f64]) -> Array {
    let (n, f) = (x.shape[0], x.shape[1]);
    let o = w.shape[1];
    let mut out = Array::zeros(&[n, o]);
    for i in 0..n {
        for j in 0..o {
            let mut acc = b[j];
            for k in 0..f {
                acc += x.data[i * f + k] * w.data[k * o + j];
            }
            out.data[i * o + j] = acc;
        }
    }
    out
}

pub fn split_channels(x: &Array, parts: usize) -> Vec<Array> {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let cg = c / parts;
    (0..parts)
        .map(|p| {
            let mut out = Array::zeros(&[n, cg, h, w]);
            for b in 0..n {
                for ch in 0..cg {
                    for y in 0..h {
                        for xx in 0..w {
                            out.data[((b * cg + ch) * h + y) * w + xx] = x.at4(b, p * cg + ch, y, xx);
                        }
                    }
                }
            }
            out
        })
        .collect()
}

pub fn concat_channels(parts: &[Array]) -> Array {
    let (n, h, w) = (parts[0].shape[0], parts[0].shape[2], parts[0].shape[3]);
    let c: usize = parts.iter().map(|p| p.shape[1]).sum();
    let mut out = Array::zeros(&[n, c, h, w]);
    for b in 0..n {
        let mut base = 0;
        for p in parts {
            for ch in 0..p.shape[1] {
                for y in 0..h {
                    for xx in 0..w {
                        out.data[((b * c + base + ch) * h + y) * w + xx] = p.at4(b, ch, y, xx);
                    }
                }
            }
            base += p.shape[1];
        }
    }
    out
}

/// Conv (no bias) followed by batch norm, optionally ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub kernel: Array,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub norm: Norm,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBn {
    pub fn apply(&self, x: &Array, eps: f64) -> Array {
        let y = conv2d(x, &self.kernel, None, self.stride, self.pad);
        batch_norm(&y, &self.gamma, &self.beta, &self.norm, eps)
    }
}

#[derive(Debug, Clone)]
pub struct SeWeights {
    pub w1: Array,
    pub b1: Vec<f64>,
    pub w2: Array,
    pub b2: Vec<f64>,
}

/// squeeze → FC → ReLU → FC → sigmoid → channel rescale
pub fn se_block(x: &Array, se: &SeWeights) -> Array {
    let squeezed = global_avg_pool(x);
    let hidden = relu(&linear(&squeezed, &se.w1, &se.b1));
    let gates = sigmoid(&linear(&hidden, &se.w2, &se.b2));
    let (n, c, hw) = (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]);
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let g = gates.data[b * c + ch];
            for v in &mut out.data[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *v *= g;
            }
        }
    }
    out
}

/// The hierarchical split: y1 = x1, y2 = K2(x2), yi = Ki(xi + y(i-1)).
/// `kernel(i, input)` is called with the 1-based group index.
pub fn multi_scale_hierarchy(groups: &[Array], mut kernel: impl FnMut(usize, &Array) -> Array) -> Vec<Array> {
    let s = groups.len();
    let mut ys: Vec<Array> = Vec::with_capacity(s);
    for i in 1..=s {
        let x_i = &groups[i - 1];
        let y_i = if i == 1 {
            x_i.clone()
        } else if i == 2 {
            kernel(2, x_i)
        } else {
            let prev = &ys[i - 2];
            kernel(i, &add(x_i, prev))
        };
        ys.push(y_i);
    }
    ys
}

#[derive(Debug, Clone)]
pub struct Res2NetWeights {
    pub scale: usize,
    pub reduce: ConvBn,
    /// `scale - 1` group kernels K2..Ks
    pub kernels: Vec<ConvBn>,
    pub expand: ConvBn,
    pub shortcut: Option<ConvBn>,
    pub se: Option<SeWeights>,
}

pub fn res2net_block(x: &Array, w: &Res2NetWeights, eps: f64) -> Array {
    let reduced = relu(&w.reduce.apply(x, eps));
    let groups = split_channels(&reduced, w.scale);
    let ys = multi_scale_hierarchy(&groups, |i, inp| relu(&w.kernels[i - 2].apply(inp, eps)));
    let merged = concat_channels(&ys);
    let mut main = w.expand.apply(&merged, eps);
    if let Some(se) = &w.se {
        main = se_block(&main, se);
    }
    let identity = match &w.shortcut {
        Some(p) => p.apply(x, eps),
        None => x.clone(),
    };
    relu(&add(&main, &identity))
}

#[derive(Debug, Clone)]
pub struct BasicWeights {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
}

pub fn basic_block(x: &Array, w: &BasicWeights, eps: f64) -> Array {
    let h = relu(&w.conv1.apply(x, eps));
    let main = w.conv2.apply(&h, eps);
    let identity = match &w.shortcut {
        Some(p) => p.apply(x, eps),
        None => x.clone(),
    };
    relu(&add(&main, &identity))
}

/// Piecewise-linear resampling of one row onto `target` points with the
/// endpoints pinned (align corners), written as a scan for the bracketing
/// source segment.
pub fn align_corners_linear(row: &[f64], target: usize) -> Vec<f64> {
    let n = row.len();
    (0..target)
        .map(|i| {
            let pos = i as f64 * (n - 1) as f64 / (target - 1) as f64;
            let mut seg = 0;
            while seg + 1 < n - 1 && (seg + 1) as f64 <= pos {
                seg += 1;
            }
            let t = pos - seg as f64;
            row[seg] + (row[seg + 1] - row[seg]) * t
        })
        .collect()
}

/// Window starts by brute-force membership: every multiple of `step` that
/// fits, plus the final position `frames - window`.
pub fn slice_starts(frames: usize, window: usize, step: usize) -> Vec<usize> {
    (0..=frames - window)
        .filter(|&s| s % step == 0 || s == frames - window)
        .collect()
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences that also report, per coordinate, whether the two
/// probes saw a different ReLU sign pattern than the unperturbed point.
pub fn central_difference_kinks(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> (Vec<f64>, Vec<bool>) {
    let (_, base) = trace_relu_signs(|| f(x));
    let mut probe = x.to_vec();
    let mut kinked = Vec::with_capacity(x.len());
    let grad = (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let (up, s_up) = trace_relu_signs(|| f(&probe));
            probe[i] = orig - h;
            let (down, s_down) = trace_relu_signs(|| f(&probe));
            probe[i] = orig;
            kinked.push(s_up != base || s_down != base);
            (up - down) / (2.0 * h)
        })
        .collect();
    (grad, kinked)
}

/// `‖a − b‖₂ / max(‖b‖₂, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}
