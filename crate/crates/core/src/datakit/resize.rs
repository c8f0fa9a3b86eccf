/// Interpolates between `a` and `b`, staying inside `[min(a, b), max(a, b)]`.
#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    let v = a + (b - a) * t;
    v.clamp(a.min(b), a.max(b))
}

/// Source sample positions for one axis: `(i0, i1, frac)` per output index,
/// using half-pixel centers (`align_corners = false`).
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of an HWC image.
pub fn resize_bilinear(img: &[f32], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(img.len(), h * w * c, "image length does not match {h}x{w}x{c}");
    assert!(out_h > 0 && out_w > 0, "resize target must be positive");
    if (h, w) == (out_h, out_w) {
        return img.to_vec();
    }
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let px = |y: usize, x: usize, ch: usize| img[(y * w + x) * c + ch];
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = lerp(px(y0, x0, ch), px(y0, x1, ch), fx);
                let bottom = lerp(px(y1, x0, ch), px(y1, x1, ch), fx);
                out.push(lerp(top, bottom, fy));
            }
        }
    }
    out
}
