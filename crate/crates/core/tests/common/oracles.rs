//! Naive f64 references for the float kernels. Each `check_*` draws its
//! data from `seed` and returns the first mismatch.

use edgequant::engine::kernels::{self, Window};
use edgequant::graph::Padding;

use super::{rng, uniform};

pub const REL: f64 = 1e-6;

/// `got` against an f64 reference whose terms had absolute sum `mag`:
/// the error is measured relative to `max(|want|, mag)`.
pub fn close(got: f32, want: f64, mag: f64) -> bool {
    (got as f64 - want).abs() <= REL * want.abs().max(mag).max(f64::MIN_POSITIVE)
}

pub fn padding(code: u8) -> Padding {
    match code % 3 {
        0 => Padding::Valid,
        1 => Padding::Same,
        _ => Padding::Explicit(1),
    }
}

type Check = Result<(), String>;

fn expect(ok: bool, what: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

/// Naive HWIO grouped convolution: `(value, sum of |terms|)` per output.
#[allow(clippy::too_many_arguments)]
pub fn conv_ref(x: &[f32], cin: usize, w: &[f32], b: Option<&[f32]>, cout: usize, groups: usize, win: &Window) -> Vec<(f64, f64)> {
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let mut out = Vec::new();
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            for co in 0..cout {
                let g = co / cout_g;
                let mut acc = b.map_or(0.0, |b| b[co] as f64);
                let mut mag = acc.abs();
                for ky in 0..win.kh {
                    for kx in 0..win.kw {
                        let (Some(iy), Some(ix)) = (win.src_y(oy, ky), win.src_x(ox, kx)) else { continue };
                        for ci in 0..cin_g {
                            let xv = x[(iy * win.in_w + ix) * cin + g * cin_g + ci] as f64;
                            let wv = w[((ky * win.kw + kx) * cin_g + ci) * cout + co] as f64;
                            acc += xv * wv;
                            mag += (xv * wv).abs();
                        }
                    }
                }
                out.push((acc, mag));
            }
        }
    }
    out
}

/// Shape parameters for the windowed checks.
#[derive(Debug, Clone, Copy)]
pub struct Geometry {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: u8,
}

impl Geometry {
    /// `None` when the padding is not valid for the kernel.
    pub fn window(&self) -> Option<Window> {
        Window::new(self.h, self.w, self.k, self.k, self.stride, padding(self.pad)).ok()
    }
}

pub fn check_conv2d(geo: Geometry, groups: usize, cin_g: usize, cout_g: usize, bias: bool, seed: u64) -> Check {
    let Some(win) = geo.window() else { return Ok(()) };
    let (cin, cout, k) = (cin_g * groups, cout_g * groups, geo.k);
    let mut r = rng(seed);
    let x = uniform(&mut r, geo.h * geo.w * cin, -1.0, 1.0);
    let wt = uniform(&mut r, k * k * cin_g * cout, -1.0, 1.0);
    let b = uniform(&mut r, cout, -1.0, 1.0);
    let b = bias.then_some(&b[..]);
    let got = kernels::conv2d(&x, cin, &wt, b, cout, groups, &win);
    let direct = kernels::conv2d_direct(&x, cin, &wt, b, cout, groups, &win);
    let want = conv_ref(&x, cin, &wt, b, cout, groups, &win);
    expect(got.len() == want.len(), || format!("conv2d: {} outputs, expected {}", got.len(), want.len()))?;
    for ((&g, &d), &(v, m)) in got.iter().zip(&direct).zip(&want) {
        expect(close(g, v, m), || format!("conv2d gemm path {g} vs {v}"))?;
        expect(close(d, v, m), || format!("conv2d direct path {d} vs {v}"))?;
    }
    Ok(())
}

pub fn check_depthwise(geo: Geometry, c: usize, bias: bool, seed: u64) -> Check {
    let Some(win) = geo.window() else { return Ok(()) };
    let k = geo.k;
    let mut r = rng(seed);
    let x = uniform(&mut r, geo.h * geo.w * c, -1.0, 1.0);
    let wt = uniform(&mut r, k * k * c, -1.0, 1.0);
    let b = uniform(&mut r, c, -1.0, 1.0);
    let b = bias.then_some(&b[..]);
    let got = kernels::depthwise_conv2d(&x, c, &wt, b, &win);
    // depthwise is a grouped conv with one channel per group
    let want = conv_ref(&x, c, &wt, b, c, c, &win);
    for (&g, &(v, m)) in got.iter().zip(&want) {
        expect(close(g, v, m), || format!("depthwise {g} vs {v}"))?;
    }
    Ok(())
}

pub fn check_fully_connected(fin: usize, fout: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let x = uniform(&mut r, fin, -1.0, 1.0);
    let wt = uniform(&mut r, fin * fout, -1.0, 1.0);
    let b = uniform(&mut r, fout, -1.0, 1.0);
    let got = kernels::fully_connected(&x, &wt, &b);
    for o in 0..fout {
        let terms: Vec<f64> = (0..fin).map(|i| x[i] as f64 * wt[i * fout + o] as f64).collect();
        let v = b[o] as f64 + terms.iter().sum::<f64>();
        let m = (b[o] as f64).abs() + terms.iter().map(|t| t.abs()).sum::<f64>();
        expect(close(got[o], v, m), || format!("fully_connected {} vs {v}", got[o]))?;
    }
    Ok(())
}

pub fn check_pools(geo: Geometry, c: usize, seed: u64) -> Check {
    let Some(win) = geo.window() else { return Ok(()) };
    let (h, w, k) = (geo.h, geo.w, geo.k);
    let mut r = rng(seed);
    let x = uniform(&mut r, h * w * c, -2.0, 2.0);
    let mx = kernels::max_pool(&x, c, &win);
    let av = kernels::avg_pool(&x, c, &win);
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let (mut sum, mut mag, mut count) = (0.0f64, 0.0f64, 0usize);
                for ky in 0..k {
                    for kx in 0..k {
                        let (Some(iy), Some(ix)) = (win.src_y(oy, ky), win.src_x(ox, kx)) else { continue };
                        let v = x[(iy * w + ix) * c + ch] as f64;
                        best = best.max(v);
                        sum += v;
                        mag += v.abs();
                        count += 1;
                    }
                }
                let o = (oy * win.out_w + ox) * c + ch;
                expect(mx[o] as f64 == best, || format!("max_pool {} vs {best}", mx[o]))?;
                let mean = sum / count as f64;
                expect(close(av[o], mean, mag / count as f64), || format!("avg_pool {} vs {mean}", av[o]))?;
            }
        }
    }
    let gap = kernels::global_avg_pool(&x, c);
    for ch in 0..c {
        let vals: Vec<f64> = (0..h * w).map(|p| x[p * c + ch] as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let mag = vals.iter().map(|v| v.abs()).sum::<f64>() / vals.len() as f64;
        expect(close(gap[ch], mean, mag), || format!("global_avg_pool {} vs {mean}", gap[ch]))?;
    }
    Ok(())
}

pub fn check_elementwise(n: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let a = uniform(&mut r, n, -8.0, 8.0);
    let b = uniform(&mut r, n, -8.0, 8.0);
    let (mut relu, mut relu6, mut silu) = (a.clone(), a.clone(), a.clone());
    kernels::relu(&mut relu);
    kernels::relu6(&mut relu6);
    kernels::silu(&mut silu);
    let sum = kernels::add(&a, &b);
    for i in 0..n {
        let v = a[i] as f64;
        expect(relu[i] as f64 == v.max(0.0), || format!("relu({v}) = {}", relu[i]))?;
        expect(relu6[i] as f64 == v.clamp(0.0, 6.0), || format!("relu6({v}) = {}", relu6[i]))?;
        let s = v / (1.0 + (-v).exp());
        expect(close(silu[i], s, v.abs()), || format!("silu({v}) = {} vs {s}", silu[i]))?;
        let t = v + b[i] as f64;
        expect(close(sum[i], t, v.abs() + (b[i] as f64).abs()), || format!("add {} vs {t}", sum[i]))?;
    }
    Ok(())
}

pub fn check_batch_norm_softmax(px: usize, c: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let x = uniform(&mut r, px * c, -3.0, 3.0);
    let gamma = uniform(&mut r, c, 0.5, 1.5);
    let beta = uniform(&mut r, c, -1.0, 1.0);
    let mean = uniform(&mut r, c, -1.0, 1.0);
    let var = uniform(&mut r, c, 0.1, 2.0);
    let mut y = x.clone();
    kernels::batch_norm(&mut y, &gamma, &beta, &mean, &var, 1e-5);
    for p in 0..px {
        for ch in 0..c {
            let i = p * c + ch;
            let scale = gamma[ch] as f64 / (var[ch] as f64 + 1e-5f32 as f64).sqrt();
            let centered = (x[i] as f64 - mean[ch] as f64) * scale;
            let want = centered + beta[ch] as f64;
            expect(close(y[i], want, centered.abs() + (beta[ch] as f64).abs()), || format!("batch_norm {} vs {want}", y[i]))?;
        }
    }
    let mut row = x[..c].to_vec();
    kernels::softmax(&mut row);
    let m = x[..c].iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let z: f64 = x[..c].iter().map(|&v| (v as f64 - m).exp()).sum();
    for (i, &p) in row.iter().enumerate() {
        let want = (x[i] as f64 - m).exp() / z;
        expect(close(p, want, 0.0), || format!("softmax {p} vs {want}"))?;
    }
    Ok(())
}

pub fn check_concat(px: usize, c1: usize, c2: usize, c3: usize) -> Check {
    let a: Vec<u32> = (0..px * c1).map(|i| i as u32).collect();
    let b: Vec<u32> = (0..px * c2).map(|i| 1000 + i as u32).collect();
    let d: Vec<u32> = (0..px * c3).map(|i| 2000 + i as u32).collect();
    let got = kernels::concat(&[(&a, c1), (&b, c2), (&d, c3)], px);
    let mut want = Vec::new();
    for p in 0..px {
        want.extend_from_slice(&a[p * c1..][..c1]);
        want.extend_from_slice(&b[p * c2..][..c2]);
        want.extend_from_slice(&d[p * c3..][..c3]);
    }
    expect(got == want, || "concat interleaving differs".into())
}

pub fn check_squeeze_excite(px: usize, c: usize, rd: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let x = uniform(&mut r, px * c, -2.0, 2.0);
    let w1 = uniform(&mut r, c * rd, -1.0, 1.0);
    let b1 = uniform(&mut r, rd, -1.0, 1.0);
    let w2 = uniform(&mut r, rd * c, -1.0, 1.0);
    let b2 = uniform(&mut r, c, -1.0, 1.0);
    let got = kernels::squeeze_excite(&x, c, &w1, &b1, &w2, &b2);
    let pooled: Vec<f64> = (0..c).map(|ch| (0..px).map(|p| x[p * c + ch] as f64).sum::<f64>() / px as f64).collect();
    let hidden: Vec<f64> = (0..rd)
        .map(|j| {
            let v = b1[j] as f64 + (0..c).map(|i| pooled[i] * w1[i * rd + j] as f64).sum::<f64>();
            v / (1.0 + (-v).exp())
        })
        .collect();
    let gate: Vec<f64> = (0..c)
        .map(|ch| {
            let v = b2[ch] as f64 + (0..rd).map(|j| hidden[j] * w2[j * c + ch] as f64).sum::<f64>();
            1.0 / (1.0 + (-v).exp())
        })
        .collect();
    for p in 0..px {
        for ch in 0..c {
            let i = p * c + ch;
            let want = x[i] as f64 * gate[ch];
            expect(close(got[i], want, (x[i] as f64).abs()), || format!("squeeze_excite {} vs {want}", got[i]))?;
        }
    }
    Ok(())
}
