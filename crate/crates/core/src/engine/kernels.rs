//! f32 inference kernels on a single NHWC sample (batch dimension dropped).

use crate::graph::Padding;
use crate::linalg::matmul;

/// Spatial geometry of one conv or pooling window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Window {
    pub fn new(in_h: usize, in_w: usize, kh: usize, kw: usize, stride: usize, pad: Padding) -> crate::Result<Self> {
        let (out_h, pad_top) = pad.resolve(in_h, kh, stride)?;
        let (out_w, pad_left) = pad.resolve(in_w, kw, stride)?;
        Ok(Window {
            in_h,
            in_w,
            kh,
            kw,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    /// Input coordinate for output `o` and kernel tap `k`, if in bounds.
    #[inline]
    pub fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * stride + k).checked_sub(pad)?;
        (p < extent).then_some(p)
    }

    #[inline]
    pub fn src_y(&self, oy: usize, ky: usize) -> Option<usize> {
        Self::src(oy, ky, self.stride, self.pad_top, self.in_h)
    }

    #[inline]
    pub fn src_x(&self, ox: usize, kx: usize) -> Option<usize> {
        Self::src(ox, kx, self.stride, self.pad_left, self.in_w)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.out_h == self.in_h && self.out_w == self.in_w
    }
}

/// Unrolls conv patches into `[out_h * out_w, kh * kw * cin]`, zero padded.
pub fn im2col<T: Copy + Default>(x: &[T], cin: usize, win: &Window) -> Vec<T> {
    let k = win.kh * win.kw * cin;
    let mut col = vec![T::default(); win.out_h * win.out_w * k];
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let row = &mut col[(oy * win.out_w + ox) * k..][..k];
            for ky in 0..win.kh {
                let Some(iy) = win.src_y(oy, ky) else { continue };
                for kx in 0..win.kw {
                    let Some(ix) = win.src_x(ox, kx) else { continue };
                    let src = &x[(iy * win.in_w + ix) * cin..][..cin];
                    row[(ky * win.kw + kx) * cin..][..cin].copy_from_slice(src);
                }
            }
        }
    }
    col
}

/// Convolution with HWIO weights. Dense convs go through im2col + GEMM,
/// grouped ones through [`conv2d_direct`].
pub fn conv2d(
    x: &[f32],
    cin: usize,
    weight: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
    groups: usize,
    win: &Window,
) -> Vec<f32> {
    if groups != 1 {
        return conv2d_direct(x, cin, weight, bias, cout, groups, win);
    }
    let rows = win.out_h * win.out_w;
    let k = win.kh * win.kw * cin;
    let mut out = vec![0.0f32; rows * cout];
    if win.is_pointwise() {
        matmul(rows, k, cout, x, weight, &mut out);
    } else {
        let col = im2col(x, cin, win);
        matmul(rows, k, cout, &col, weight, &mut out);
    }
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(cout) {
            row.iter_mut().zip(b).for_each(|(o, &b)| *o += b);
        }
    }
    out
}

/// Direct-loop grouped convolution; the straightforward reference form.
pub fn conv2d_direct(
    x: &[f32],
    cin: usize,
    weight: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
    groups: usize,
    win: &Window,
) -> Vec<f32> {
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = vec![0.0f32; win.out_h * win.out_w * cout];
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let o = &mut out[(oy * win.out_w + ox) * cout..][..cout];
            for co in 0..cout {
                let g = co / cout_g;
                let mut acc = bias.map_or(0.0, |b| b[co]);
                for ky in 0..win.kh {
                    let Some(iy) = win.src_y(oy, ky) else { continue };
                    for kx in 0..win.kw {
                        let Some(ix) = win.src_x(ox, kx) else { continue };
                        let xb = (iy * win.in_w + ix) * cin + g * cin_g;
                        let wb = (ky * win.kw + kx) * cin_g;
                        for ci in 0..cin_g {
                            acc += x[xb + ci] * weight[(wb + ci) * cout + co];
                        }
                    }
                }
                o[co] = acc;
            }
        }
    }
    out
}

/// Depthwise convolution, weights `[kh, kw, 1, c]`.
pub fn depthwise_conv2d(x: &[f32], c: usize, weight: &[f32], bias: Option<&[f32]>, win: &Window) -> Vec<f32> {
    let mut out = vec![0.0f32; win.out_h * win.out_w * c];
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let o = &mut out[(oy * win.out_w + ox) * c..][..c];
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for ky in 0..win.kh {
                let Some(iy) = win.src_y(oy, ky) else { continue };
                for kx in 0..win.kw {
                    let Some(ix) = win.src_x(ox, kx) else { continue };
                    let xs = &x[(iy * win.in_w + ix) * c..][..c];
                    let ws = &weight[(ky * win.kw + kx) * c..][..c];
                    for ((o, &xv), &wv) in o.iter_mut().zip(xs).zip(ws) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    out
}

/// `x[in] . w[in, out] + b`.
pub fn fully_connected(x: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let out_f = bias.len();
    let mut out = vec![0.0f32; out_f];
    matmul(1, x.len(), out_f, x, weight, &mut out);
    out.iter_mut().zip(bias).for_each(|(o, &b)| *o += b);
    out
}

/// Max pooling; padded positions never win.
pub fn max_pool(x: &[f32], c: usize, win: &Window) -> Vec<f32> {
    let mut out = vec![f32::NEG_INFINITY; win.out_h * win.out_w * c];
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let o = &mut out[(oy * win.out_w + ox) * c..][..c];
            for ky in 0..win.kh {
                let Some(iy) = win.src_y(oy, ky) else { continue };
                for kx in 0..win.kw {
                    let Some(ix) = win.src_x(ox, kx) else { continue };
                    let xs = &x[(iy * win.in_w + ix) * c..][..c];
                    o.iter_mut().zip(xs).for_each(|(o, &v)| *o = o.max(v));
                }
            }
        }
    }
    out
}

/// Number of in-bounds taps of each output position.
pub fn window_counts(win: &Window) -> Vec<usize> {
    let mut counts = Vec::with_capacity(win.out_h * win.out_w);
    for oy in 0..win.out_h {
        let ny = (0..win.kh).filter(|&k| win.src_y(oy, k).is_some()).count();
        for ox in 0..win.out_w {
            let nx = (0..win.kw).filter(|&k| win.src_x(ox, k).is_some()).count();
            counts.push(ny * nx);
        }
    }
    counts
}

/// Average pooling over in-bounds elements only.
pub fn avg_pool(x: &[f32], c: usize, win: &Window) -> Vec<f32> {
    let counts = window_counts(win);
    let mut out = vec![0.0f32; win.out_h * win.out_w * c];
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let pos = oy * win.out_w + ox;
            let o = &mut out[pos * c..][..c];
            for ky in 0..win.kh {
                let Some(iy) = win.src_y(oy, ky) else { continue };
                for kx in 0..win.kw {
                    let Some(ix) = win.src_x(ox, kx) else { continue };
                    let xs = &x[(iy * win.in_w + ix) * c..][..c];
                    o.iter_mut().zip(xs).for_each(|(o, &v)| *o += v);
                }
            }
            let n = counts[pos] as f32;
            o.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

pub fn global_avg_pool(x: &[f32], c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c];
    let n = x.len() / c;
    for px in x.chunks_exact(c) {
        out.iter_mut().zip(px).for_each(|(o, &v)| *o += v);
    }
    out.iter_mut().for_each(|v| *v /= n as f32);
    out
}

pub fn relu(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

pub fn relu6(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.clamp(0.0, 6.0));
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

#[inline]
pub fn silu_scalar(v: f32) -> f32 {
    v * sigmoid(v)
}

pub fn silu(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = silu_scalar(*v));
}

pub fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Concatenates `[outer, inner_i]` blocks along the middle axis, where each
/// operand is viewed as `outer` rows of `inner_i` contiguous elements.
pub fn concat<T: Copy>(parts: &[(&[T], usize)], outer: usize) -> Vec<T> {
    let total: usize = parts.iter().map(|(_, inner)| inner).sum();
    let mut out = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (data, inner) in parts {
            out.extend_from_slice(&data[o * inner..][..*inner]);
        }
    }
    out
}

/// Inference batch norm: `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn batch_norm(x: &mut [f32], gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f32) {
    let c = gamma.len();
    let inv: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    for px in x.chunks_exact_mut(c) {
        for i in 0..c {
            px[i] = (px[i] - mean[i]) * inv[i] * gamma[i] + beta[i];
        }
    }
}

/// Numerically stable softmax over one row.
pub fn softmax(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Squeeze-excite: pool, fc + SiLU, fc + sigmoid, rescale channels.
pub fn squeeze_excite(x: &[f32], c: usize, w1: &[f32], b1: &[f32], w2: &[f32], b2: &[f32]) -> Vec<f32> {
    let pooled = global_avg_pool(x, c);
    let mut hidden = fully_connected(&pooled, w1, b1);
    silu(&mut hidden);
    let gate: Vec<f32> = fully_connected(&hidden, w2, b2).into_iter().map(sigmoid).collect();
    let mut out = x.to_vec();
    for px in out.chunks_exact_mut(c) {
        px.iter_mut().zip(&gate).for_each(|(v, g)| *v *= g);
    }
    out
}
