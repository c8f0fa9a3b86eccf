//! Central-difference gradient checks on randomized micro-nets.

use edgequant::graph::Padding;
use edgequant::trainer::{cross_entropy, Network};
use edgequant::{Graph, NodeKind};
use rand::seq::index::sample;

use super::{rng, uniform, Micro};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-3;
pub const SAMPLED: usize = 100;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between analytic and central-difference gradients
/// over up to 100 sampled weights and 20 sampled input elements.
pub fn worst_error(g: &Graph, n: usize, input_range: f32, seed: u64) -> f64 {
    let mut net = Network::<f64>::from_graph(g).unwrap();
    let mut rng = rng(seed);
    let x: Vec<f64> = uniform(&mut rng, n * net.input_len(), -input_range, input_range)
        .into_iter()
        .map(f64::from)
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % net.num_classes()).collect();
    let (_, _, grads, _) = net.loss_and_grads(&x, n, &labels).unwrap();

    let slots: Vec<(usize, usize, usize)> = net
        .params
        .iter()
        .enumerate()
        .flat_map(|(i, ps)| ps.iter().enumerate().flat_map(move |(s, p)| (0..p.len()).map(move |e| (i, s, e))))
        .collect();
    assert!(!slots.is_empty());
    let picks = sample(&mut rng, slots.len(), SAMPLED.min(slots.len()));
    let mut worst = 0.0f64;
    for p in picks.iter() {
        let (i, s, e) = slots[p];
        let orig = net.params[i][s][e];
        net.params[i][s][e] = orig + H;
        let up = net.loss(&x, n, &labels).unwrap();
        net.params[i][s][e] = orig - H;
        let down = net.loss(&x, n, &labels).unwrap();
        net.params[i][s][e] = orig;
        let numeric = (up - down) / (2.0 * H);
        worst = worst.max(rel_err(grads.params[i][s][e], numeric));
    }
    let picks = sample(&mut rng, x.len(), 20.min(x.len()));
    for e in picks.iter() {
        let mut xp = x.clone();
        xp[e] = x[e] + H;
        let up = net.loss(&xp, n, &labels).unwrap();
        xp[e] = x[e] - H;
        let down = net.loss(&xp, n, &labels).unwrap();
        worst = worst.max(rel_err(grads.input[e], (up - down) / (2.0 * H)));
    }
    worst
}

/// A named micro-net: graph, batch size and input range.
pub struct Case {
    pub name: &'static str,
    pub graph: Graph,
    pub batch: usize,
    pub range: f32,
}

fn case(name: &'static str, graph: Graph, batch: usize, range: f32) -> Case {
    Case { name, graph, batch, range }
}

pub fn cases() -> Vec<Case> {
    let mut out = vec![];

    let mut m = Micro::new(6, 6, 3, 1);
    let c = m.conv("input", 4, 3, 2, Padding::Explicit(1), 1, true);
    let c = m.conv(&c, 4, 3, 1, Padding::Same, 1, false);
    out.push(case("conv", m.classifier(&c, 3), 2, 1.0));

    let mut m = Micro::new(5, 5, 4, 2);
    let c = m.conv("input", 6, 3, 1, Padding::Valid, 2, true);
    out.push(case("grouped_conv", m.classifier(&c, 3), 2, 1.0));

    let mut m = Micro::new(4, 4, 3, 3);
    let c = m.conv("input", 5, 1, 1, Padding::Valid, 1, true);
    out.push(case("pointwise_conv", m.classifier(&c, 3), 2, 1.0));

    let mut m = Micro::new(6, 6, 3, 4);
    let d = m.depthwise("input", 3, 2, Padding::Same, true);
    let d = m.depthwise(&d, 3, 1, Padding::Explicit(1), false);
    out.push(case("depthwise", m.classifier(&d, 3), 2, 1.0));

    let mut m = Micro::new(2, 2, 3, 5);
    let f = m.fc("input", 6);
    out.push(case("fc", m.classifier(&f, 4), 3, 1.0));

    let mut m = Micro::new(4, 4, 2, 6);
    let c = m.conv("input", 3, 3, 1, Padding::Same, 1, false);
    let b = m.bn(&c);
    out.push(case("bn", m.classifier(&b, 3), 4, 1.0));

    for (name, kind, range) in [
        ("relu", NodeKind::ReLU, 1.0),
        ("relu6", NodeKind::ReLU6, 4.0),
        ("silu", NodeKind::SiLU, 2.0),
    ] {
        let mut m = Micro::new(4, 4, 2, 7);
        let c = m.conv("input", 4, 3, 1, Padding::Same, 1, true);
        let a = m.op(&c, kind);
        out.push(case(name, m.classifier(&a, 3), 2, range));
    }

    for (name, kind) in [
        ("max_pool", NodeKind::MaxPool { k: 3, stride: 2, pad: Padding::Same }),
        ("avg_pool", NodeKind::AvgPool { k: 3, stride: 2, pad: Padding::Explicit(1) }),
        ("global_avg_pool", NodeKind::GlobalAvgPool),
    ] {
        let mut m = Micro::new(6, 6, 2, 8);
        let c = m.conv("input", 3, 3, 1, Padding::Same, 1, true);
        let p = m.op(&c, kind);
        out.push(case(name, m.classifier(&p, 3), 2, 1.0));
    }

    let mut m = Micro::new(4, 4, 2, 9);
    let a = m.conv("input", 3, 3, 1, Padding::Same, 1, true);
    let b = m.conv("input", 3, 1, 1, Padding::Valid, 1, false);
    let s = m.push(NodeKind::Add, &[&a, &b], vec![]);
    out.push(case("add", m.classifier(&s, 3), 2, 1.0));

    let mut m = Micro::new(4, 4, 2, 10);
    let a = m.conv("input", 3, 3, 1, Padding::Same, 1, true);
    let b = m.conv("input", 2, 1, 1, Padding::Valid, 1, false);
    let c = m.push(NodeKind::Concat { axis: 3 }, &[&a, "input", &b], vec![]);
    out.push(case("concat", m.classifier(&c, 3), 2, 1.0));

    let mut m = Micro::new(4, 4, 4, 11);
    let c = m.conv("input", 4, 3, 1, Padding::Same, 1, true);
    let s = m.se(&c, 2);
    out.push(case("squeeze_excite", m.classifier(&s, 3), 2, 1.0));

    out
}

/// Worst error of the case called `name` over three seeds.
pub fn check_case(name: &str) -> Result<f64, String> {
    let c = cases().into_iter().find(|c| c.name == name).unwrap_or_else(|| panic!("no case `{name}`"));
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let e = worst_error(&c.graph, c.batch, c.range, seed);
        if !(e < TOL) {
            return Err(format!("{name} seed {seed}: relative error {e:e}"));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Softmax plus cross-entropy on a random 3x5 instance, every logit checked.
pub fn check_softmax_cross_entropy(seed: u64) -> Result<f64, String> {
    let mut rng = rng(seed);
    let (n, k) = (3, 5);
    let logits: Vec<f64> = uniform(&mut rng, n * k, -2.0, 2.0).into_iter().map(f64::from).collect();
    let labels = [4, 0, 2];
    let (_, grad) = cross_entropy(&logits, n, k, &labels).unwrap();
    let mut worst = 0.0f64;
    for e in 0..n * k {
        let mut l = logits.clone();
        l[e] += H;
        let up = cross_entropy(&l, n, k, &labels).unwrap().0;
        l[e] -= 2.0 * H;
        let down = cross_entropy(&l, n, k, &labels).unwrap().0;
        let err = rel_err(grad[e], (up - down) / (2.0 * H));
        if !(err < TOL) {
            return Err(format!("softmax+ce logit {e}: relative error {err:e}"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
