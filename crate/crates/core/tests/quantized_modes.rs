mod common;

use common::Micro;
use edgequant::datakit::{split, synth_generate, SplitSpec};
use edgequant::engine::{run, Engine, ExecMode};
use edgequant::evalkit::argmax;
use edgequant::graph::{build_architecture, Family, Padding, TinyConfig};
use edgequant::quantizer::{calibrate, quantize_dynamic, quantize_dynamic_with, quantize_fp16, quantize_full, QuantizeConfig};
use edgequant::tensor::{f16_to_f32, f32_to_f16};
use edgequant::trainer::{train, TrainConfig};
use edgequant::{DType, Graph, NodeKind, Tensor};

const SIZE: usize = 32;

fn tiny(seed: u64) -> Graph {
    build_architecture(Family::TinyCnn(TinyConfig::default()), 4, (SIZE, SIZE), seed).unwrap()
}

/// The same graph ending at the logits instead of the softmax.
fn logits_of(g: &Graph) -> Graph {
    let mut g = g.clone();
    let last = g.nodes.pop().unwrap();
    assert!(matches!(last.kind, NodeKind::Softmax));
    g.outputs = vec![last.inputs[0].clone()];
    g.validate().unwrap();
    g
}

fn random_batch(n: usize, seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut rng = common::rng(seed);
    Tensor::from_f32(vec![n, SIZE, SIZE, 3], common::uniform(&mut rng, n * SIZE * SIZE * 3, lo, hi)).unwrap()
}

fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    let k = t.shape()[1];
    t.as_f32().unwrap().chunks(k).map(<[f32]>::to_vec).collect()
}

fn agreement(a: &[Vec<f32>], b: &[Vec<f32>]) -> f64 {
    let same = a.iter().zip(b).filter(|(p, q)| argmax(p) == argmax(q)).count();
    same as f64 / a.len() as f64
}

#[test]
fn softmax_rows_sum_to_one_in_every_mode() {
    let g = tiny(1);
    let x = random_batch(8, 2, 0.0, 1.0);
    let stats = calibrate(&g, [x.clone()], 1).unwrap();
    let models = [
        (g.clone(), ExecMode::F32),
        (quantize_fp16(&g).unwrap(), ExecMode::Fp16),
        (quantize_dynamic(&g).unwrap(), ExecMode::DynamicInt8),
        (quantize_full(&g, &stats).unwrap(), ExecMode::FullInt8),
    ];
    for (m, mode) in &models {
        for row in rows(&run(m, &x, *mode).unwrap()) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-5, "{}: row sums to {s}", mode.name());
        }
    }
}

#[test]
fn mode_must_match_the_graph_tag() {
    let g = tiny(1);
    let d = quantize_dynamic(&g).unwrap();
    assert!(Engine::new(&d, ExecMode::F32).is_err());
    assert!(Engine::new(&g, ExecMode::FullInt8).is_err());
    let wrong = Tensor::from_f32(vec![1, 8, 8, 3], vec![0.0; 192]).unwrap();
    assert!(run(&g, &wrong, ExecMode::F32).is_err());
}

#[test]
fn identity_conv_on_equal_logits_is_uniform() {
    let mut m = Micro::new(1, 1, 4, 0);
    let mut eye = vec![0f32; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    let kind = NodeKind::Conv2D { kh: 1, kw: 1, stride: 1, pad: Padding::Valid, groups: 1, has_bias: false };
    let c = m.push(kind, &["input"], vec![Tensor::from_f32(vec![1, 1, 4, 4], eye).unwrap()]);
    let s = m.op(&c, NodeKind::Softmax);
    let g = m.finish(&s);
    let out = run(&g, &Tensor::from_f32(vec![1, 1, 1, 4], vec![0.7; 4]).unwrap(), ExecMode::F32).unwrap();
    assert_eq!(out.as_f32().unwrap(), &[0.25; 4]);
}

fn pattern(n: usize, salt: usize) -> Vec<f32> {
    (0..n).map(|i| (((i * 7 + salt * 3) % 11) as f32 - 5.0) / 10.0).collect()
}

#[test]
fn hand_instance_matches_scalar_loops() {
    // 4x4x1 -> conv3x3 same (2, bias) -> relu -> conv3x3 valid (2) -> relu -> fc 8 -> 3
    let x = pattern(16, 1);
    let (w1, b1, w2, wf, bf) = (pattern(18, 2), vec![0.1, -0.2], pattern(36, 3), pattern(24, 4), vec![0.05, 0.0, -0.05]);
    let mut m = Micro::new(4, 4, 1, 0);
    let t = |shape: Vec<usize>, d: &[f32]| Tensor::from_f32(shape, d.to_vec()).unwrap();
    let c1 = m.push(
        NodeKind::Conv2D { kh: 3, kw: 3, stride: 1, pad: Padding::Same, groups: 1, has_bias: true },
        &["input"],
        vec![t(vec![3, 3, 1, 2], &w1), t(vec![2], &b1)],
    );
    let r1 = m.op(&c1, NodeKind::ReLU);
    let c2 = m.push(
        NodeKind::Conv2D { kh: 3, kw: 3, stride: 1, pad: Padding::Valid, groups: 1, has_bias: false },
        &[&r1],
        vec![t(vec![3, 3, 2, 2], &w2)],
    );
    let r2 = m.op(&c2, NodeKind::ReLU);
    let fc = m.push(NodeKind::FullyConnected, &[&r2], vec![t(vec![8, 3], &wf), t(vec![3], &bf)]);
    let g = m.finish(&fc);
    let got = run(&g, &t(vec![1, 4, 4, 1], &x), ExecMode::F32).unwrap();

    let mut a1 = vec![0f64; 4 * 4 * 2];
    for y in 0..4i64 {
        for xx in 0..4i64 {
            for o in 0..2 {
                let mut s = b1[o] as f64;
                for dy in 0..3i64 {
                    for dx in 0..3i64 {
                        let (iy, ix) = (y + dy - 1, xx + dx - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            s += x[(iy * 4 + ix) as usize] as f64 * w1[((dy * 3 + dx) * 2) as usize + o] as f64;
                        }
                    }
                }
                a1[((y * 4 + xx) * 2) as usize + o] = s.max(0.0);
            }
        }
    }
    let mut a2 = vec![0f64; 2 * 2 * 2];
    for y in 0..2 {
        for xx in 0..2 {
            for o in 0..2 {
                let mut s = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        for i in 0..2 {
                            s += a1[((y + dy) * 4 + xx + dx) * 2 + i] * w2[((dy * 3 + dx) * 2 + i) * 2 + o] as f64;
                        }
                    }
                }
                a2[(y * 2 + xx) * 2 + o] = s.max(0.0);
            }
        }
    }
    let want: Vec<f64> = (0..3)
        .map(|o| bf[o] as f64 + (0..8).map(|i| a2[i] * wf[i * 3 + o] as f64).sum::<f64>())
        .collect();
    for (g, w) in got.as_f32().unwrap().iter().zip(&want) {
        assert!((*g as f64 - w).abs() <= 1e-6, "{g} vs {w}");
    }
}

#[test]
fn fp16_is_exact_for_binary16_weights() {
    let mut g = tiny(3);
    for node in &mut g.nodes {
        for w in &mut node.weights {
            for v in w.as_f32_mut().unwrap() {
                *v = f16_to_f32(f32_to_f16(*v));
            }
        }
    }
    let q = quantize_fp16(&g).unwrap();
    assert!(q.nodes.iter().flat_map(|n| &n.weights).all(|w| w.dtype() == DType::F16));
    let x = random_batch(4, 4, -1.0, 1.0);
    let a = run(&g, &x, ExecMode::F32).unwrap();
    let b = run(&q, &x, ExecMode::Fp16).unwrap();
    assert!(a.bitwise_eq(&b));
}

#[test]
fn fp16_tracks_f32() {
    let g = logits_of(&tiny(5));
    let q = quantize_fp16(&g).unwrap();
    let x = random_batch(1000, 6, 0.0, 1.0);
    let a = rows(&run(&g, &x, ExecMode::F32).unwrap());
    let b = rows(&run(&q, &x, ExecMode::Fp16).unwrap());
    for (p, q) in a.iter().zip(&b) {
        let scale = p.iter().fold(0f32, |m, v| m.max(v.abs()));
        let dev = p.iter().zip(q).fold(0f32, |m, (u, v)| m.max((u - v).abs()));
        assert!(dev <= 1e-2 * scale, "relative logit deviation {}", dev / scale);
    }
    let agree = agreement(&a, &b);
    assert!(agree >= 0.99, "argmax agreement {agree}");
}

#[test]
fn dynamic_is_exact_on_the_grid() {
    // weights k/64 with |k| <= 127 and 127 present in every output channel;
    // inputs j/8 with 0 and 255/8 present in every sample
    let (cin, cout) = (3, 5);
    let mut m = Micro::new(6, 6, cin, 0);
    let w: Vec<f32> = (0..9 * cin * cout)
        .map(|i| if i < cout { 127.0 / 64.0 } else { ((i * 37 % 255) as f32 - 127.0) / 64.0 })
        .collect();
    let kind = NodeKind::Conv2D { kh: 3, kw: 3, stride: 1, pad: Padding::Same, groups: 1, has_bias: true };
    let c = m.push(
        kind,
        &["input"],
        vec![Tensor::from_f32(vec![3, 3, cin, cout], w).unwrap(), Tensor::from_f32(vec![cout], vec![0.25, -0.5, 0.0, 1.0, 0.125]).unwrap()],
    );
    let g = m.finish(&c);
    let cfg = QuantizeConfig { min_elements: 0, ..QuantizeConfig::default() };
    let q = quantize_dynamic_with(&g, &cfg).unwrap();
    assert_eq!(q.nodes.last().unwrap().weights[0].dtype(), DType::I8);
    let n = 2;
    let mut x: Vec<f32> = (0..n * 6 * 6 * cin).map(|i| ((i * 53 % 256) as f32) / 8.0).collect();
    for s in 0..n {
        x[s * 108] = 0.0;
        x[s * 108 + 1] = 255.0 / 8.0;
    }
    let x = Tensor::from_f32(vec![n, 6, 6, cin], x).unwrap();
    let a = run(&g, &x, ExecMode::F32).unwrap();
    let b = run(&q, &x, ExecMode::DynamicInt8).unwrap();
    for (u, v) in a.as_f32().unwrap().iter().zip(b.as_f32().unwrap()) {
        assert!((u - v).abs() <= 1e-6 * u.abs().max(1.0), "{u} vs {v}");
    }
}

#[test]
fn dynamic_logit_error_is_bounded() {
    let g = logits_of(&tiny(7));
    let q = quantize_dynamic_with(&g, &QuantizeConfig { min_elements: 0, ..QuantizeConfig::default() }).unwrap();
    let x = random_batch(200, 8, 0.0, 1.0);
    let a = run(&g, &x, ExecMode::F32).unwrap();
    let b = run(&q, &x, ExecMode::DynamicInt8).unwrap();
    let err = a.as_f32().unwrap().iter().zip(b.as_f32().unwrap()).fold(0f32, |m, (u, v)| m.max((u - v).abs()));
    assert!(err <= 0.1, "max abs logit error {err}");
}

#[test]
fn full_int_agrees_with_f32_after_calibration() {
    let ds = synth_generate(4, 100, (16, 16), 0.1, 9).unwrap();
    let (tr, va, te) = split(&ds, &SplitSpec { seed: 9, ..SplitSpec::default() }).unwrap();
    let tiny = Family::TinyCnn(TinyConfig { width: 8, depth: 2, batch_norm: true });
    let g = build_architecture(tiny, 4, (16, 16), 9).unwrap();
    let cfg = TrainConfig { epochs: 3, seed: 9, ..TrainConfig::default() };
    let (g, _) = train(&g, &tr, &va, &cfg).unwrap();
    let stats = calibrate(&g, tr.batches(32), 100).unwrap();
    let q = quantize_full(&g, &stats).unwrap();
    let idx: Vec<usize> = (0..te.len()).collect();
    let x = te.batch(&idx).unwrap();
    let a = rows(&run(&g, &x, ExecMode::F32).unwrap());
    let b = rows(&run(&q, &x, ExecMode::FullInt8).unwrap());
    let agree = agreement(&a, &b);
    assert!(agree >= 0.95, "argmax agreement {agree}");
}
