//! Random conv + batch-norm instances for folding checks.

use edgequant::engine::{run, ExecMode};
use edgequant::graph::Padding;
use edgequant::{Graph, Tensor};
use rand::Rng;

use super::{rng, uniform, Micro};

/// `max |a - b| / max |a|` over the outputs of both graphs on `x`.
pub fn max_rel_dev(a: &Graph, b: &Graph, x: &Tensor) -> f32 {
    let ya = run(a, x, ExecMode::F32).unwrap();
    let yb = run(b, x, ExecMode::F32).unwrap();
    let (ya, yb) = (ya.as_f32().unwrap(), yb.as_f32().unwrap());
    let scale = ya.iter().fold(0f32, |m, v| m.max(v.abs()));
    let dev = ya.iter().zip(yb).fold(0f32, |m, (p, q)| m.max((p - q).abs()));
    dev / scale
}

pub fn random_input(m: &mut Micro, n: usize) -> Tensor {
    let [_, h, w, c] = m.g.input.shape;
    let data = uniform(&mut m.rng, n * h * w * c, -1.0, 1.0);
    Tensor::from_f32(vec![n, h, w, c], data).unwrap()
}

/// A conv-like layer followed by BN; `seed % 4` picks dense, grouped,
/// depthwise, or two stacked conv+BN pairs.
pub fn instance(seed: u64) -> (Graph, Tensor) {
    let mut r = rng(seed);
    let c = 4 * r.gen_range(1..=3);
    let size = r.gen_range(5..=9);
    let mut m = Micro::new(size, size, c, seed);
    let k = [1, 3, 5][r.gen_range(0..3)];
    let stride = r.gen_range(1..=2);
    let pad = [Padding::Same, Padding::Valid, Padding::Explicit(k / 2)][r.gen_range(0..3)];
    let bias = r.gen_bool(0.5);
    let cout = 4 * r.gen_range(1..=3);
    let layer = match seed % 4 {
        0 => m.conv("input", cout, k, stride, pad, 1, bias),
        1 => m.conv("input", cout, k, stride, pad, 2, bias),
        2 => m.depthwise("input", k, stride, pad, bias),
        _ => {
            let a = m.conv("input", cout, k, 1, Padding::Same, 1, bias);
            let b = m.bn(&a);
            let act = m.op(&b, edgequant::NodeKind::ReLU);
            m.conv(&act, cout, 3, stride, Padding::Same, 1, !bias)
        }
    };
    let out = m.bn(&layer);
    let x = random_input(&mut m, 3);
    (m.finish(&out), x)
}
