//! Integer kernels on a single NHWC sample.
//!
//! Matmul-like kernels take activations already centered on their zero
//! point (`q - zp`, as i16) so that zero padding means real zero, and return
//! raw i32 accumulators. Weights are symmetric, so they need no centering.

use super::fixed_point::{saturating_rounding_multiply, FixedPointMultiplier, Requantizer};
use super::kernels::{im2col, window_counts, Window};
use crate::error::Result;
use crate::tensor::{dequantize_value, quantize_value, QMAX, QMIN};

/// Scale and zero point of a per-tensor int8 activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Act {
    pub scale: f32,
    pub zp: i32,
}

impl Act {
    #[inline]
    pub fn quantize(&self, x: f32) -> i8 {
        quantize_value(x, self.scale, self.zp)
    }

    #[inline]
    pub fn dequantize(&self, q: i8) -> f32 {
        dequantize_value(q, self.scale, self.zp)
    }
}

#[inline]
pub fn saturate(v: i32) -> i8 {
    v.clamp(QMIN, QMAX) as i8
}

pub fn center(q: &[i8], zp: i32) -> Vec<i16> {
    q.iter().map(|&v| (v as i32 - zp) as i16).collect()
}

/// Row-major `a(m x k) * b(k x n)` with i32 accumulation.
pub fn gemm_i16_i8(m: usize, k: usize, n: usize, a: &[i16], b: &[i8]) -> Vec<i32> {
    let mut out = vec![0i32; m * n];
    for (row, acc) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (kk, &av) in row.iter().enumerate() {
            if av == 0 {
                continue;
            }
            let av = av as i32;
            let brow = &b[kk * n..][..n];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += av * bv as i32;
            }
        }
    }
    out
}

/// Convolution accumulators, HWIO weights.
pub fn conv2d(a: &[i16], cin: usize, w: &[i8], cout: usize, groups: usize, win: &Window) -> Vec<i32> {
    let rows = win.out_h * win.out_w;
    if groups == 1 {
        let k = win.kh * win.kw * cin;
        if win.is_pointwise() {
            return gemm_i16_i8(rows, k, cout, a, w);
        }
        return gemm_i16_i8(rows, k, cout, &im2col(a, cin, win), w);
    }
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = vec![0i32; rows * cout];
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let o = &mut out[(oy * win.out_w + ox) * cout..][..cout];
            for (co, acc) in o.iter_mut().enumerate() {
                let g = co / cout_g;
                for ky in 0..win.kh {
                    let Some(iy) = win.src_y(oy, ky) else { continue };
                    for kx in 0..win.kw {
                        let Some(ix) = win.src_x(ox, kx) else { continue };
                        let ab = (iy * win.in_w + ix) * cin + g * cin_g;
                        let wb = (ky * win.kw + kx) * cin_g;
                        for ci in 0..cin_g {
                            *acc += a[ab + ci] as i32 * w[(wb + ci) * cout + co] as i32;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_conv2d(a: &[i16], c: usize, w: &[i8], win: &Window) -> Vec<i32> {
    let mut out = vec![0i32; win.out_h * win.out_w * c];
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let o = &mut out[(oy * win.out_w + ox) * c..][..c];
            for ky in 0..win.kh {
                let Some(iy) = win.src_y(oy, ky) else { continue };
                for kx in 0..win.kw {
                    let Some(ix) = win.src_x(ox, kx) else { continue };
                    let xs = &a[(iy * win.in_w + ix) * c..][..c];
                    let ws = &w[(ky * win.kw + kx) * c..][..c];
                    for ((o, &xv), &wv) in o.iter_mut().zip(xs).zip(ws) {
                        *o += xv as i32 * wv as i32;
                    }
                }
            }
        }
    }
    out
}

/// Adds the i32 bias and maps accumulators onto the output activation grid.
pub fn requantize(acc: &[i32], bias: &[i32], req: &[Requantizer], out_zp: i32) -> Vec<i8> {
    let c = bias.len();
    acc.chunks_exact(c)
        .flat_map(|row| {
            row.iter()
                .zip(bias)
                .zip(req)
                .map(|((&a, &b), r)| saturate(r.apply(a.saturating_add(b)).saturating_add(out_zp)))
        })
        .collect()
}

/// `n / d` rounded to nearest, ties to even.
#[inline]
pub fn div_round_half_even(n: i32, d: i32) -> i32 {
    let q = n.div_euclid(d);
    let r2 = 2 * n.rem_euclid(d);
    if r2 > d || (r2 == d && q % 2 != 0) {
        q + 1
    } else {
        q
    }
}

pub fn max_pool(x: &[i8], c: usize, win: &Window) -> Vec<i8> {
    let mut out = vec![i8::MIN; win.out_h * win.out_w * c];
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let o = &mut out[(oy * win.out_w + ox) * c..][..c];
            for ky in 0..win.kh {
                let Some(iy) = win.src_y(oy, ky) else { continue };
                for kx in 0..win.kw {
                    let Some(ix) = win.src_x(ox, kx) else { continue };
                    let xs = &x[(iy * win.in_w + ix) * c..][..c];
                    o.iter_mut().zip(xs).for_each(|(o, &v)| *o = (*o).max(v));
                }
            }
        }
    }
    out
}

/// Average of raw int8 codes; since quantization is affine, the mean of the
/// codes is the code of the mean, so qparams pass through.
pub fn avg_pool(x: &[i8], c: usize, win: &Window) -> Vec<i8> {
    let counts = window_counts(win);
    let mut out = Vec::with_capacity(win.out_h * win.out_w * c);
    let mut sum = vec![0i32; c];
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            sum.iter_mut().for_each(|s| *s = 0);
            for ky in 0..win.kh {
                let Some(iy) = win.src_y(oy, ky) else { continue };
                for kx in 0..win.kw {
                    let Some(ix) = win.src_x(ox, kx) else { continue };
                    let xs = &x[(iy * win.in_w + ix) * c..][..c];
                    sum.iter_mut().zip(xs).for_each(|(s, &v)| *s += v as i32);
                }
            }
            let n = counts[oy * win.out_w + ox] as i32;
            out.extend(sum.iter().map(|&s| saturate(div_round_half_even(s, n))));
        }
    }
    out
}

pub fn global_avg_pool(x: &[i8], c: usize) -> Vec<i8> {
    let mut sum = vec![0i64; c];
    for px in x.chunks_exact(c) {
        sum.iter_mut().zip(px).for_each(|(s, &v)| *s += v as i64);
    }
    let n = (x.len() / c) as i64;
    sum.iter()
        .map(|&s| {
            // i32 is ample for any realistic map, but keep the division exact
            let s = s.clamp(i32::MIN as i64, i32::MAX as i64) as i32;
            saturate(div_round_half_even(s, n as i32))
        })
        .collect()
}

pub fn relu(x: &mut [i8], zp: i32) {
    let lo = saturate(zp);
    x.iter_mut().for_each(|v| *v = (*v).max(lo));
}

pub fn relu6(x: &mut [i8], act: Act) {
    let lo = saturate(act.zp);
    let hi = act.quantize(6.0);
    x.iter_mut().for_each(|v| *v = (*v).clamp(lo, hi));
}

/// 256-entry table mapping input codes through `f` to output codes.
pub fn lookup_table(input: Act, output: Act, f: impl Fn(f32) -> f32) -> [i8; 256] {
    let mut lut = [0i8; 256];
    for q in i8::MIN..=i8::MAX {
        lut[(q as u8) as usize] = output.quantize(f(input.dequantize(q)));
    }
    lut
}

pub fn apply_lut(x: &mut [i8], lut: &[i8; 256]) {
    x.iter_mut().for_each(|v| *v = lut[(*v as u8) as usize]);
}

/// Integer elementwise add: both operands are brought onto a common
/// `2 * max(s_a, s_b) / 2^20` grid, summed, then rescaled to the output.
#[derive(Debug, Clone, Copy)]
pub struct AddParams {
    a_zp: i32,
    b_zp: i32,
    out_zp: i32,
    a_mult: FixedPointMultiplier,
    b_mult: FixedPointMultiplier,
    out_mult: Requantizer,
}

const ADD_LEFT_SHIFT: u32 = 20;

impl AddParams {
    pub fn new(a: Act, b: Act, out: Act) -> Result<Self> {
        let twice_max = 2.0 * (a.scale as f64).max(b.scale as f64);
        Ok(AddParams {
            a_zp: a.zp,
            b_zp: b.zp,
            out_zp: out.zp,
            a_mult: FixedPointMultiplier::from_real(a.scale as f64 / twice_max)?,
            b_mult: FixedPointMultiplier::from_real(b.scale as f64 / twice_max)?,
            out_mult: Requantizer::from_real(twice_max / ((1u64 << ADD_LEFT_SHIFT) as f64 * out.scale as f64))?,
        })
    }

    #[inline]
    pub fn apply(&self, a: i8, b: i8) -> i8 {
        let a = saturating_rounding_multiply((a as i32 - self.a_zp) << ADD_LEFT_SHIFT, self.a_mult);
        let b = saturating_rounding_multiply((b as i32 - self.b_zp) << ADD_LEFT_SHIFT, self.b_mult);
        saturate(self.out_mult.apply(a + b).saturating_add(self.out_zp))
    }
}

pub fn add(a: &[i8], b: &[i8], p: &AddParams) -> Vec<i8> {
    a.iter().zip(b).map(|(&x, &y)| p.apply(x, y)).collect()
}

/// Moves codes from one activation grid to another.
#[derive(Debug, Clone, Copy)]
pub struct Rescale {
    from_zp: i32,
    to_zp: i32,
    mult: Requantizer,
}

impl Rescale {
    /// `None` when the grids coincide and codes can be copied.
    pub fn new(from: Act, to: Act) -> Result<Option<Self>> {
        if from == to {
            return Ok(None);
        }
        Ok(Some(Rescale {
            from_zp: from.zp,
            to_zp: to.zp,
            mult: Requantizer::from_real(from.scale as f64 / to.scale as f64)?,
        }))
    }

    #[inline]
    pub fn apply(&self, q: i8) -> i8 {
        saturate(self.mult.apply(q as i32 - self.from_zp).saturating_add(self.to_zp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Padding;

    #[test]
    fn half_even_division() {
        assert_eq!(div_round_half_even(5, 2), 2);
        assert_eq!(div_round_half_even(7, 2), 4);
        assert_eq!(div_round_half_even(-5, 2), -2);
        assert_eq!(div_round_half_even(-7, 2), -4);
        assert_eq!(div_round_half_even(10, 4), 2);
        assert_eq!(div_round_half_even(11, 4), 3);
        assert_eq!(div_round_half_even(-11, 4), -3);
        assert_eq!(div_round_half_even(0, 9), 0);
    }

    #[test]
    fn zero_accumulator_maps_to_zero_point() {
        let req = [Requantizer::from_real(0.37).unwrap()];
        assert_eq!(requantize(&[0], &[0], &req, -17), vec![-17]);
    }

    #[test]
    fn add_matches_float() {
        let a = Act { scale: 0.05, zp: -10 };
        let b = Act { scale: 0.02, zp: 3 };
        let out = Act { scale: 0.06, zp: 1 };
        let p = AddParams::new(a, b, out).unwrap();
        for qa in (-128..=127).step_by(7) {
            for qb in (-128..=127).step_by(5) {
                let want = out.quantize(a.dequantize(qa as i8) + b.dequantize(qb as i8));
                let got = p.apply(qa as i8, qb as i8);
                assert!((got as i32 - want as i32).abs() <= 1, "{qa} {qb}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn grouped_conv_matches_dense_on_one_group() {
        let win = Window::new(4, 4, 3, 3, 1, Padding::Same).unwrap();
        let a: Vec<i16> = (0..32).map(|i| (i * 37 % 255 - 127) as i16).collect();
        let w: Vec<i8> = (0..3 * 3 * 2 * 3).map(|i| (i * 11 % 200 - 100) as i8).collect();
        let dense = conv2d(&a, 2, &w, 3, 1, &win);
        // one group through the direct path
        let cin_g = 2;
        let mut direct = vec![0i32; 16 * 3];
        for oy in 0..4 {
            for ox in 0..4 {
                for co in 0..3 {
                    let mut acc = 0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (Some(iy), Some(ix)) = (win.src_y(oy, ky), win.src_x(ox, kx)) else { continue };
                            for ci in 0..cin_g {
                                acc += a[(iy * 4 + ix) * 2 + ci] as i32 * w[((ky * 3 + kx) * 2 + ci) * 3 + co] as i32;
                            }
                        }
                    }
                    direct[(oy * 4 + ox) * 3 + co] = acc;
                }
            }
        }
        assert_eq!(dense, direct);
    }

    #[test]
    fn avg_pool_rounds_half_even() {
        let win = Window::new(1, 2, 1, 2, 2, Padding::Valid).unwrap();
        assert_eq!(avg_pool(&[1, 2], 1, &win), vec![2]);
        assert_eq!(avg_pool(&[2, 3], 1, &win), vec![2]);
        assert_eq!(avg_pool(&[-3, -2], 1, &win), vec![-2]);
    }

    #[test]
    fn relu_clamps_at_zero_point() {
        let mut x = [-128i8, -20, -5, 0, 90];
        relu(&mut x, -5);
        assert_eq!(x, [-5, -5, -5, 0, 90]);
    }
}
