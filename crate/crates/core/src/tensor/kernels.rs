//! Raw forward/backward kernels on flat row-major buffers.
//!
//! Convolution lowers each sample to an im2col matrix and runs one GEMM;
//! samples are processed in parallel and per-sample weight gradients are
//! summed in sample order so results do not depend on thread scheduling.

use rayon::prelude::*;

use super::{shape_err, Result};

/// `c = a · b + beta · c` for row-major views given as (row stride, col stride).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if k > 0 {
        assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
        assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    }
    // SAFETY: bounds of every addressed element are checked above and the
    // three buffers are distinct borrows.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape bookkeeping for a 2-d cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: [usize; 4], kernel: [usize; 4], stride: usize, pad: usize) -> Result<Self> {
        let [n, c, h, w] = input;
        let [o, kc, kh, kw] = kernel;
        if kc != c {
            return Err(shape_err(
                "conv2d",
                "kernel",
                format!("[O, {c}, kh, kw] (input has {c} channels)"),
                &kernel,
            ));
        }
        if stride == 0 {
            return Err(super::TensorError::Invalid {
                op: "conv2d",
                message: "stride must be positive".into(),
            });
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(shape_err(
                "conv2d",
                "kernel",
                format!("spatial extent <= padded input {}x{}", h + 2 * pad, w + 2 * pad),
                &kernel,
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn in_size(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_size(&self) -> usize {
        self.o * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Output column range `[lo, hi)` whose input coordinate for kernel tap
    /// `k` falls inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.pad;
        // smallest o with o*s + k >= p
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // largest o with o*s + k - p < extent
        let hi = if k >= p + extent {
            0
        } else {
            ((extent + p - k - 1) / s + 1).min(out)
        };
        (lo.min(hi), hi)
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let positions = g.positions();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                dst.fill(0.0);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx - g.pad;
                        dst_row[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst_row[ox] = src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let positions = g.positions();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        dst_row[ox * g.stride + kx - g.pad] += src_row[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &[f32], kernel: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let mut out = vec![0.0f32; g.n * g.out_size()];
    let positions = g.positions();
    let patch = g.patch();
    out.par_chunks_mut(g.out_size())
        .zip(x.par_chunks(g.in_size()))
        .for_each(|(out_n, x_n)| {
            let owned;
            let cols: &[f32] = if g.pointwise() {
                x_n
            } else {
                let mut buf = vec![0.0f32; patch * positions];
                im2col(x_n, g, &mut buf);
                owned = buf;
                &owned
            };
            gemm(
                g.o,
                patch,
                positions,
                kernel,
                (patch, 1),
                cols,
                (positions, 1),
                0.0,
                out_n,
            );
            if let Some(b) = bias {
                for (row, &bv) in out_n.chunks_mut(positions).zip(b) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub kernel: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    x: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    g: &ConvGeom,
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> ConvGrads {
    let positions = g.positions();
    let patch = g.patch();
    let ksize = g.o * patch;

    let per_sample: Vec<(Option<Vec<f32>>, Option<Vec<f32>>)> = x
        .par_chunks(g.in_size())
        .zip(grad_out.par_chunks(g.out_size()))
        .map(|(x_n, dy_n)| {
            let owned;
            let cols: &[f32] = if !need_kernel || g.pointwise() {
                x_n
            } else {
                let mut buf = vec![0.0f32; patch * positions];
                im2col(x_n, g, &mut buf);
                owned = buf;
                &owned
            };
            let dk = need_kernel.then(|| {
                let mut dk = vec![0.0f32; ksize];
                gemm(
                    g.o,
                    positions,
                    patch,
                    dy_n,
                    (positions, 1),
                    cols,
                    (1, positions),
                    0.0,
                    &mut dk,
                );
                dk
            });
            let dx = need_input.then(|| {
                let mut dcols = vec![0.0f32; patch * positions];
                gemm(
                    patch,
                    g.o,
                    positions,
                    kernel,
                    (1, patch),
                    dy_n,
                    (positions, 1),
                    0.0,
                    &mut dcols,
                );
                if g.pointwise() {
                    dcols
                } else {
                    let mut dx = vec![0.0f32; g.in_size()];
                    col2im_add(&dcols, g, &mut dx);
                    dx
                }
            });
            (dx, dk)
        })
        .collect();

    let mut input = need_input.then(|| Vec::with_capacity(g.n * g.in_size()));
    let mut kgrad = need_kernel.then(|| vec![0.0f32; ksize]);
    for (dx, dk) in per_sample {
        if let (Some(acc), Some(dx)) = (input.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        if let (Some(acc), Some(dk)) = (kgrad.as_mut(), dk) {
            acc.iter_mut().zip(&dk).for_each(|(a, b)| *a += b);
        }
    }
    let bias = need_bias.then(|| {
        let mut db = vec![0.0f32; g.o];
        for dy_n in grad_out.chunks(g.out_size()) {
            for (acc, row) in db.iter_mut().zip(dy_n.chunks(positions)) {
                *acc += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        db
    });
    ConvGrads {
        input,
        kernel: kgrad,
        bias,
    }
}

/// Max pooling with implicit `-inf` padding. Returns the output and, per
/// output cell, the flat index of the winning input cell.
pub fn max_pool2d_forward(
    x: &[f32],
    dims: [usize; 4],
    size: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, Vec<u32>, [usize; 4]) {
    let [n, c, h, w] = dims;
    let ho = (h + 2 * pad - size) / stride + 1;
    let wo = (w + 2 * pad - size) / stride + 1;
    let mut out = vec![0.0f32; n * c * ho * wo];
    let mut arg = vec![0u32; out.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = base;
                for ky in 0..size {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..size {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = best_idx as u32;
            }
        }
    }
    (out, arg, [n, c, ho, wo])
}

/// Per-channel mean and biased variance over N, H, W, accumulated in `f64`.
pub fn channel_moments(x: &[f32], dims: [usize; 4]) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            s += x[off..off + hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            q += x[off..off + hw]
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}
