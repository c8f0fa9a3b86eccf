#![allow(dead_code)]

pub mod folding;
pub mod gradcheck;
pub mod oracles;
pub mod quantcheck;

use edgequant::datakit::LabeledDataset;
use edgequant::engine::{Engine, ExecMode};
use edgequant::evalkit::{argmax, EvalReport};
use edgequant::graph::{GraphMeta, InputSpec, Padding};
use edgequant::{DType, Graph, Node, NodeKind, QuantTag, Tensor};
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    let d = Uniform::new_inclusive(lo, hi);
    (0..n).map(|_| d.sample(rng)).collect()
}

fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
    Tensor::from_f32(shape, data).unwrap()
}

/// Builds small graphs with random weights, one node at a time.
pub struct Micro {
    pub g: Graph,
    pub rng: ChaCha8Rng,
    last: String,
    count: usize,
}

impl Micro {
    pub fn new(h: usize, w: usize, c: usize, seed: u64) -> Self {
        let g = Graph::new(
            InputSpec {
                shape: [1, h, w, c],
                dtype: DType::F32,
            },
            GraphMeta {
                family: "micro".into(),
                num_classes: 1,
                quant: QuantTag::None,
                class_names: vec![],
            },
        );
        Micro {
            g,
            rng: rng(seed),
            last: "input".into(),
            count: 0,
        }
    }

    pub fn last(&self) -> String {
        self.last.clone()
    }

    pub fn shape(&self, id: &str) -> [usize; 4] {
        let shapes = self.g.infer_shapes().unwrap();
        let i = self.g.nodes.iter().position(|n| n.id == id).unwrap();
        shapes[i]
    }

    pub fn push(&mut self, kind: NodeKind, inputs: &[&str], weights: Vec<Tensor>) -> String {
        self.count += 1;
        let id = format!("n{}.{}", self.count, kind.name());
        self.g.nodes.push(Node::new(id.clone(), kind, inputs, weights));
        self.g.infer_shapes().unwrap_or_else(|e| panic!("{id}: {e}"));
        self.last = id.clone();
        id
    }

    pub fn conv(&mut self, input: &str, cout: usize, k: usize, stride: usize, pad: Padding, groups: usize, bias: bool) -> String {
        let cin = self.shape(input)[3] / groups;
        let mut weights = vec![tensor(vec![k, k, cin, cout], uniform(&mut self.rng, k * k * cin * cout, -1.0, 1.0))];
        if bias {
            weights.push(tensor(vec![cout], uniform(&mut self.rng, cout, -0.5, 0.5)));
        }
        let kind = NodeKind::Conv2D {
            kh: k,
            kw: k,
            stride,
            pad,
            groups,
            has_bias: bias,
        };
        self.push(kind, &[input], weights)
    }

    pub fn depthwise(&mut self, input: &str, k: usize, stride: usize, pad: Padding, bias: bool) -> String {
        let c = self.shape(input)[3];
        let mut weights = vec![tensor(vec![k, k, 1, c], uniform(&mut self.rng, k * k * c, -1.0, 1.0))];
        if bias {
            weights.push(tensor(vec![c], uniform(&mut self.rng, c, -0.5, 0.5)));
        }
        let kind = NodeKind::DepthwiseConv2D {
            kh: k,
            kw: k,
            stride,
            pad,
            has_bias: bias,
        };
        self.push(kind, &[input], weights)
    }

    /// Batch norm with random affine parameters and running statistics.
    pub fn bn(&mut self, input: &str) -> String {
        let c = self.shape(input)[3];
        let weights = vec![
            tensor(vec![c], uniform(&mut self.rng, c, 0.5, 1.5)),
            tensor(vec![c], uniform(&mut self.rng, c, -0.5, 0.5)),
            tensor(vec![c], uniform(&mut self.rng, c, -0.5, 0.5)),
            tensor(vec![c], uniform(&mut self.rng, c, 0.5, 2.0)),
        ];
        self.push(NodeKind::BatchNorm { eps: 1e-5 }, &[input], weights)
    }

    pub fn op(&mut self, input: &str, kind: NodeKind) -> String {
        self.push(kind, &[input], vec![])
    }

    pub fn fc(&mut self, input: &str, out: usize) -> String {
        let [_, h, w, c] = self.shape(input);
        let fan_in = h * w * c;
        let scale = (3.0 / fan_in as f32).sqrt();
        let weights = vec![
            tensor(vec![fan_in, out], uniform(&mut self.rng, fan_in * out, -scale, scale)),
            tensor(vec![out], uniform(&mut self.rng, out, -0.1, 0.1)),
        ];
        self.push(NodeKind::FullyConnected, &[input], weights)
    }

    pub fn se(&mut self, input: &str, reduced: usize) -> String {
        let c = self.shape(input)[3];
        let weights = vec![
            tensor(vec![c, reduced], uniform(&mut self.rng, c * reduced, -1.0, 1.0)),
            tensor(vec![reduced], uniform(&mut self.rng, reduced, -0.5, 0.5)),
            tensor(vec![reduced, c], uniform(&mut self.rng, reduced * c, -1.0, 1.0)),
            tensor(vec![c], uniform(&mut self.rng, c, -0.5, 0.5)),
        ];
        self.push(NodeKind::SqueezeExcite { reduced }, &[input], weights)
    }

    /// Appends an fc head of `classes` outputs and a softmax.
    pub fn classifier(mut self, input: &str, classes: usize) -> Graph {
        let logits = self.fc(input, classes);
        let out = self.op(&logits, NodeKind::Softmax);
        self.g.outputs = vec![out];
        self.g.meta.num_classes = classes;
        self.g.validate().unwrap();
        self.g
    }

    /// Ends the graph at `output` without a classifier.
    pub fn finish(mut self, output: &str) -> Graph {
        self.g.outputs = vec![output.to_string()];
        self.g.validate().unwrap();
        self.g
    }
}

pub fn accuracy(g: &Graph, ds: &LabeledDataset, mode: ExecMode) -> f32 {
    let engine = Engine::new(g, mode).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(64) {
        let out = engine.run(&ds.batch(chunk).unwrap()).unwrap();
        let k = out.shape()[1];
        for (row, &i) in out.as_f32().unwrap().chunks(k).zip(chunk) {
            correct += (argmax(row) == ds.samples[i].label) as usize;
        }
    }
    correct as f32 / ds.len() as f32
}

pub fn predictions(g: &Graph, batch: &Tensor, mode: ExecMode) -> Vec<usize> {
    let out = edgequant::engine::run(g, batch, mode).unwrap();
    let k = out.shape()[1];
    out.as_f32().unwrap().chunks(k).map(argmax).collect()
}

/// Quantized rows of the paper's post-quantization results table: model,
/// mode, size in MB, accuracy, precision, recall, F1.
pub const TABLE6_QUANTIZED: [(&str, &str, f64, [f32; 4]); 10] = [
    ("VGG-16", "fp16", 256.10, [0.96, 0.96, 0.96, 0.96]),
    ("VGG-16", "dynamic", 128.08, [0.95, 0.96, 0.96, 0.95]),
    ("GoogLeNet", "fp16", 0.668, [0.97, 0.97, 0.97, 0.97]),
    ("GoogLeNet", "dynamic", 0.143, [0.97, 0.97, 0.97, 0.97]),
    ("ResNet", "fp16", 22.4, [0.96, 0.96, 0.96, 0.96]),
    ("ResNet", "dynamic", 1.70, [0.95, 0.96, 0.95, 0.95]),
    ("MobileNet-v2", "fp16", 0.991, [0.96, 0.97, 0.97, 0.96]),
    ("MobileNet-v2", "dynamic", 0.188, [0.96, 0.97, 0.97, 0.96]),
    ("EfficientNet", "fp16", 8.10, [0.99, 0.99, 0.99, 0.99]),
    ("EfficientNet", "dynamic", 4.50, [0.99, 0.99, 0.99, 0.99]),
];

pub fn table6_reports() -> Vec<EvalReport> {
    TABLE6_QUANTIZED
        .iter()
        .map(|&(model, mode, mb, m)| {
            let id = format!("{model}-{mode}");
            EvalReport::summary(&id, model, mode, (mb * 1e6).round() as u64, m)
        })
        .collect()
}

pub fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

/// Small synthetic train/val/test splits at 16x16.
pub fn small_splits(seed: u64) -> (LabeledDataset, LabeledDataset, LabeledDataset) {
    let ds = edgequant::datakit::synth_generate(4, 40, (16, 16), 0.1, seed).unwrap();
    let spec = edgequant::datakit::SplitSpec { seed, ..Default::default() };
    edgequant::datakit::split(&ds, &spec).unwrap()
}

/// A narrow tiny_cnn trained for two epochs on `small_splits(seed)`.
pub fn small_trained(seed: u64) -> Graph {
    use edgequant::graph::{build_architecture, Family, TinyConfig};
    use edgequant::trainer::{train, TrainConfig};
    let (tr, va, _) = small_splits(seed);
    let tiny = Family::TinyCnn(TinyConfig { width: 4, depth: 2, batch_norm: true });
    let g = build_architecture(tiny, 4, (16, 16), seed).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 16, seed, ..TrainConfig::default() };
    train(&g, &tr, &va, &cfg).unwrap().0
}

/// Raw output bits of `g` on the whole of `ds`.
pub fn output_bits(g: &Graph, ds: &LabeledDataset, mode: ExecMode) -> Vec<u32> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let out = edgequant::engine::run(g, &ds.batch(&idx).unwrap(), mode).unwrap();
    out.as_f32().unwrap().iter().map(|v| v.to_bits()).collect()
}
