//! Architecture builders for the supported CNN families.
//!
//! Topologies follow the common reference implementations: convs followed
//! by batch norm carry no bias, GoogLeNet has no auxiliary classifiers,
//! dropout is omitted (it has no parameters and is inactive at inference).
//! Weights are He-uniform from an explicit seed; biases start at zero and
//! batch norm starts as the identity.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{node_output_shape, Graph, GraphMeta, InputSpec, Node, NodeKind, Padding, QuantTag, INPUT_ID};
use crate::error::{ensure, Error, Result};
use crate::tensor::{DType, Tensor};

/// Width/depth knobs of the small trainable family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinyConfig {
    /// Channels of the first conv; doubled at every stage.
    pub width: usize,
    /// Number of conv/pool stages.
    pub depth: usize,
    pub batch_norm: bool,
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig {
            width: 8,
            depth: 3,
            batch_norm: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Vgg16,
    GoogLeNet,
    ResNet18,
    MobileNetV2,
    EfficientNetB0,
    TinyCnn(TinyConfig),
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Vgg16 => "vgg16",
            Family::GoogLeNet => "googlenet",
            Family::ResNet18 => "resnet18",
            Family::MobileNetV2 => "mobilenet_v2",
            Family::EfficientNetB0 => "efficientnet_b0",
            Family::TinyCnn(_) => "tiny_cnn",
        }
    }

    pub fn default_input_size(&self) -> (usize, usize) {
        match self {
            Family::TinyCnn(_) => (32, 32),
            _ => (224, 224),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vgg16" | "vgg_16" => Family::Vgg16,
            "googlenet" => Family::GoogLeNet,
            "resnet18" | "resnet_18" => Family::ResNet18,
            "mobilenet_v2" | "mobilenetv2" => Family::MobileNetV2,
            "efficientnet_b0" | "efficientnetb0" => Family::EfficientNetB0,
            "tiny_cnn" | "tiny" => Family::TinyCnn(TinyConfig::default()),
            other => return Err(Error::invalid(format!("unknown architecture family `{other}`"))),
        })
    }
}

/// Builds a freshly initialized graph of `family` with a `num_classes` head.
pub fn build_architecture(
    family: Family,
    num_classes: usize,
    input_size: (usize, usize),
    init_seed: u64,
) -> Result<Graph> {
    ensure!(num_classes >= 2, "num_classes must be at least 2, got {num_classes}");
    let (h, w) = input_size;
    match family {
        Family::Vgg16 => ensure!(
            h / 32 == 7 && w / 32 == 7,
            "vgg16 needs a 224..255 input so the classifier sees 7x7x512, got {h}x{w}"
        ),
        Family::TinyCnn(cfg) => {
            ensure!(cfg.width > 0 && cfg.depth > 0, "tiny_cnn width and depth must be positive");
            ensure!(
                h >> cfg.depth >= 1 && w >> cfg.depth >= 1,
                "tiny_cnn with depth {} needs inputs of at least {}x{}",
                cfg.depth,
                1 << cfg.depth,
                1 << cfg.depth
            );
        }
        _ => ensure!(h >= 32 && w >= 32, "{family} needs inputs of at least 32x32, got {h}x{w}"),
    }
    let mut b = Builder::new(family, num_classes, input_size, init_seed);
    let logits = match family {
        Family::Vgg16 => vgg16(&mut b),
        Family::GoogLeNet => googlenet(&mut b),
        Family::ResNet18 => resnet18(&mut b),
        Family::MobileNetV2 => mobilenet_v2(&mut b),
        Family::EfficientNetB0 => efficientnet_b0(&mut b),
        Family::TinyCnn(cfg) => tiny_cnn(&mut b, cfg),
    }?;
    b.finish(&logits)
}

/// He-uniform weights, `bound = sqrt(6 / fan_in)`.
pub(crate) fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_f32(shape, data).expect("shape and buffer built together")
}

fn filled(len: usize, value: f32) -> Tensor {
    Tensor::from_f32(vec![len], vec![value; len]).expect("non-empty vector")
}

pub(crate) struct Builder {
    graph: Graph,
    rng: ChaCha8Rng,
    shapes: HashMap<String, [usize; 4]>,
}

impl Builder {
    pub(crate) fn new(family: Family, num_classes: usize, (h, w): (usize, usize), seed: u64) -> Self {
        let graph = Graph::new(
            InputSpec {
                shape: [1, h, w, 3],
                dtype: DType::F32,
            },
            GraphMeta {
                family: family.name().to_string(),
                num_classes,
                quant: QuantTag::None,
                class_names: vec![],
            },
        );
        Builder {
            graph,
            rng: ChaCha8Rng::seed_from_u64(seed),
            shapes: HashMap::from([(INPUT_ID.to_string(), [1, h, w, 3])]),
        }
    }

    fn shape(&self, id: &str) -> [usize; 4] {
        self.shapes[id]
    }

    fn channels(&self, id: &str) -> usize {
        self.shape(id)[3]
    }

    fn push(&mut self, node: Node) -> Result<String> {
        let ins: Vec<[usize; 4]> = node.inputs.iter().map(|i| self.shape(i)).collect();
        let shape = node_output_shape(&node, &ins, self.graph.input.shape)
            .map_err(|e| Error::invalid(format!("building `{}`: {e}", node.id)))?;
        let id = node.id.clone();
        self.shapes.insert(id.clone(), shape);
        self.graph.nodes.push(node);
        Ok(id)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        id: &str,
        input: &str,
        cout: usize,
        k: usize,
        stride: usize,
        pad: Padding,
        groups: usize,
        has_bias: bool,
    ) -> Result<String> {
        let cin = self.channels(input) / groups;
        let mut weights = vec![he_uniform(&mut self.rng, vec![k, k, cin, cout], k * k * cin)];
        if has_bias {
            weights.push(filled(cout, 0.0));
        }
        let kind = NodeKind::Conv2D {
            kh: k,
            kw: k,
            stride,
            pad,
            groups,
            has_bias,
        };
        self.push(Node::new(id, kind, &[input], weights))
    }

    fn depthwise(&mut self, id: &str, input: &str, k: usize, stride: usize, pad: Padding) -> Result<String> {
        let c = self.channels(input);
        let weights = vec![he_uniform(&mut self.rng, vec![k, k, 1, c], k * k)];
        let kind = NodeKind::DepthwiseConv2D {
            kh: k,
            kw: k,
            stride,
            pad,
            has_bias: false,
        };
        self.push(Node::new(id, kind, &[input], weights))
    }

    fn bn(&mut self, id: &str, input: &str, eps: f32) -> Result<String> {
        let c = self.channels(input);
        let weights = vec![filled(c, 1.0), filled(c, 0.0), filled(c, 0.0), filled(c, 1.0)];
        self.push(Node::new(id, NodeKind::BatchNorm { eps }, &[input], weights))
    }

    fn act(&mut self, id: &str, input: &str, kind: NodeKind) -> Result<String> {
        self.push(Node::new(id, kind, &[input], vec![]))
    }

    /// conv (no bias) -> BN -> optional activation.
    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &mut self,
        prefix: &str,
        input: &str,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        eps: f32,
        act: Option<NodeKind>,
    ) -> Result<String> {
        let pad = Padding::Explicit((k - 1) / 2);
        let c = self.conv(&format!("{prefix}.conv"), input, cout, k, stride, pad, groups, false)?;
        let out = self.bn(&format!("{prefix}.bn"), &c, eps)?;
        match act {
            Some(kind) => self.act(&format!("{prefix}.act"), &out, kind),
            None => Ok(out),
        }
    }

    fn pool(&mut self, id: &str, input: &str, kind: NodeKind) -> Result<String> {
        self.push(Node::new(id, kind, &[input], vec![]))
    }

    fn fc(&mut self, id: &str, input: &str, out: usize) -> Result<String> {
        let [_, h, w, c] = self.shape(input);
        let fan_in = h * w * c;
        let weights = vec![he_uniform(&mut self.rng, vec![fan_in, out], fan_in), filled(out, 0.0)];
        self.push(Node::new(id, NodeKind::FullyConnected, &[input], weights))
    }

    fn add(&mut self, id: &str, a: &str, b: &str) -> Result<String> {
        self.push(Node::new(id, NodeKind::Add, &[a, b], vec![]))
    }

    fn squeeze_excite(&mut self, id: &str, input: &str, reduced: usize) -> Result<String> {
        let c = self.channels(input);
        let weights = vec![
            he_uniform(&mut self.rng, vec![c, reduced], c),
            filled(reduced, 0.0),
            he_uniform(&mut self.rng, vec![reduced, c], reduced),
            filled(c, 0.0),
        ];
        self.push(Node::new(id, NodeKind::SqueezeExcite { reduced }, &[input], weights))
    }

    fn finish(mut self, logits: &str) -> Result<Graph> {
        let out = self.push(Node::new("softmax", NodeKind::Softmax, &[logits], vec![]))?;
        self.graph.outputs = vec![out];
        self.graph.validate()?;
        Ok(self.graph)
    }
}

fn vgg16(b: &mut Builder) -> Result<String> {
    const CFG: [usize; 18] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];
    let mut x = INPUT_ID.to_string();
    let (mut conv, mut pool) = (0, 0);
    for &c in &CFG {
        if c == 0 {
            pool += 1;
            let kind = NodeKind::MaxPool {
                k: 2,
                stride: 2,
                pad: Padding::Valid,
            };
            x = b.pool(&format!("pool{pool}"), &x, kind)?;
        } else {
            conv += 1;
            let id = format!("conv{conv}");
            x = b.conv(&id, &x, c, 3, 1, Padding::Explicit(1), 1, true)?;
            x = b.act(&format!("{id}.relu"), &x, NodeKind::ReLU)?;
        }
    }
    x = b.fc("fc1", &x, 4096)?;
    x = b.act("fc1.relu", &x, NodeKind::ReLU)?;
    x = b.fc("fc2", &x, 4096)?;
    x = b.act("fc2.relu", &x, NodeKind::ReLU)?;
    let classes = b.graph.meta.num_classes;
    b.fc("fc3", &x, classes)
}

const GOOGLENET_BN_EPS: f32 = 1e-3;

fn basic_conv(b: &mut Builder, prefix: &str, input: &str, cout: usize, k: usize, stride: usize) -> Result<String> {
    b.conv_bn(prefix, input, cout, k, stride, 1, GOOGLENET_BN_EPS, Some(NodeKind::ReLU))
}

fn inception(
    b: &mut Builder,
    name: &str,
    input: &str,
    [c1, c3r, c3, c5r, c5, pool_proj]: [usize; 6],
) -> Result<String> {
    let b1 = basic_conv(b, &format!("{name}.b1"), input, c1, 1, 1)?;
    let b2 = basic_conv(b, &format!("{name}.b2a"), input, c3r, 1, 1)?;
    let b2 = basic_conv(b, &format!("{name}.b2b"), &b2, c3, 3, 1)?;
    // the widely used reference implementation uses a 3x3 kernel here
    let b3 = basic_conv(b, &format!("{name}.b3a"), input, c5r, 1, 1)?;
    let b3 = basic_conv(b, &format!("{name}.b3b"), &b3, c5, 3, 1)?;
    let pool = NodeKind::MaxPool {
        k: 3,
        stride: 1,
        pad: Padding::Same,
    };
    let b4 = b.pool(&format!("{name}.b4pool"), input, pool)?;
    let b4 = basic_conv(b, &format!("{name}.b4"), &b4, pool_proj, 1, 1)?;
    let node = Node::new(format!("{name}.concat"), NodeKind::Concat { axis: 3 }, &[&b1, &b2, &b3, &b4], vec![]);
    b.push(node)
}

fn googlenet(b: &mut Builder) -> Result<String> {
    let maxpool = NodeKind::MaxPool {
        k: 3,
        stride: 2,
        pad: Padding::Same,
    };
    let mut x = basic_conv(b, "conv1", INPUT_ID, 64, 7, 2)?;
    x = b.pool("pool1", &x, maxpool)?;
    x = basic_conv(b, "conv2", &x, 64, 1, 1)?;
    x = basic_conv(b, "conv3", &x, 192, 3, 1)?;
    x = b.pool("pool2", &x, maxpool)?;
    x = inception(b, "inc3a", &x, [64, 96, 128, 16, 32, 32])?;
    x = inception(b, "inc3b", &x, [128, 128, 192, 32, 96, 64])?;
    x = b.pool("pool3", &x, maxpool)?;
    x = inception(b, "inc4a", &x, [192, 96, 208, 16, 48, 64])?;
    x = inception(b, "inc4b", &x, [160, 112, 224, 24, 64, 64])?;
    x = inception(b, "inc4c", &x, [128, 128, 256, 24, 64, 64])?;
    x = inception(b, "inc4d", &x, [112, 144, 288, 32, 64, 64])?;
    x = inception(b, "inc4e", &x, [256, 160, 320, 32, 128, 128])?;
    x = b.pool("pool4", &x, maxpool)?;
    x = inception(b, "inc5a", &x, [256, 160, 320, 32, 128, 128])?;
    x = inception(b, "inc5b", &x, [384, 192, 384, 48, 128, 128])?;
    x = b.pool("gap", &x, NodeKind::GlobalAvgPool)?;
    let classes = b.graph.meta.num_classes;
    b.fc("fc", &x, classes)
}

const RESNET_BN_EPS: f32 = 1e-5;

fn basic_block(b: &mut Builder, name: &str, input: &str, cout: usize, stride: usize) -> Result<String> {
    let relu = Some(NodeKind::ReLU);
    let y = b.conv_bn(&format!("{name}.1"), input, cout, 3, stride, 1, RESNET_BN_EPS, relu)?;
    let y = b.conv_bn(&format!("{name}.2"), &y, cout, 3, 1, 1, RESNET_BN_EPS, None)?;
    let shortcut = if stride != 1 || b.channels(input) != cout {
        b.conv_bn(&format!("{name}.down"), input, cout, 1, stride, 1, RESNET_BN_EPS, None)?
    } else {
        input.to_string()
    };
    let sum = b.add(&format!("{name}.add"), &y, &shortcut)?;
    b.act(&format!("{name}.relu"), &sum, NodeKind::ReLU)
}

fn resnet18(b: &mut Builder) -> Result<String> {
    let mut x = b.conv_bn("stem", INPUT_ID, 64, 7, 2, 1, RESNET_BN_EPS, Some(NodeKind::ReLU))?;
    let pool = NodeKind::MaxPool {
        k: 3,
        stride: 2,
        pad: Padding::Explicit(1),
    };
    x = b.pool("stem.pool", &x, pool)?;
    for (stage, &c) in [64, 128, 256, 512].iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            x = basic_block(b, &format!("layer{}.{block}", stage + 1), &x, c, stride)?;
        }
    }
    x = b.pool("gap", &x, NodeKind::GlobalAvgPool)?;
    let classes = b.graph.meta.num_classes;
    b.fc("fc", &x, classes)
}

const MOBILENET_BN_EPS: f32 = 1e-5;

fn mobilenet_v2(b: &mut Builder) -> Result<String> {
    // (expansion, out channels, repeats, first stride)
    const SETTINGS: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let relu6 = Some(NodeKind::ReLU6);
    let mut x = b.conv_bn("stem", INPUT_ID, 32, 3, 2, 1, MOBILENET_BN_EPS, relu6)?;
    let mut block = 0;
    for &(t, c, n, s) in &SETTINGS {
        for i in 0..n {
            let stride = if i == 0 { s } else { 1 };
            let name = format!("block{block}");
            let cin = b.channels(&x);
            let mut y = x.clone();
            if t != 1 {
                y = b.conv_bn(&format!("{name}.expand"), &y, cin * t, 1, 1, 1, MOBILENET_BN_EPS, relu6)?;
            }
            let dw = b.depthwise(&format!("{name}.dw.conv"), &y, 3, stride, Padding::Explicit(1))?;
            let dw = b.bn(&format!("{name}.dw.bn"), &dw, MOBILENET_BN_EPS)?;
            y = b.act(&format!("{name}.dw.act"), &dw, NodeKind::ReLU6)?;
            y = b.conv_bn(&format!("{name}.project"), &y, c, 1, 1, 1, MOBILENET_BN_EPS, None)?;
            x = if stride == 1 && cin == c {
                b.add(&format!("{name}.add"), &y, &x)?
            } else {
                y
            };
            block += 1;
        }
    }
    x = b.conv_bn("head", &x, 1280, 1, 1, 1, MOBILENET_BN_EPS, relu6)?;
    x = b.pool("gap", &x, NodeKind::GlobalAvgPool)?;
    let classes = b.graph.meta.num_classes;
    b.fc("fc", &x, classes)
}

const EFFICIENTNET_BN_EPS: f32 = 1e-3;

fn efficientnet_b0(b: &mut Builder) -> Result<String> {
    // (expansion, kernel, first stride, out channels, repeats)
    const STAGES: [(usize, usize, usize, usize, usize); 7] = [
        (1, 3, 1, 16, 1),
        (6, 3, 2, 24, 2),
        (6, 5, 2, 40, 2),
        (6, 3, 2, 80, 3),
        (6, 5, 1, 112, 3),
        (6, 5, 2, 192, 4),
        (6, 3, 1, 320, 1),
    ];
    let silu = Some(NodeKind::SiLU);
    let mut x = b.conv_bn("stem", INPUT_ID, 32, 3, 2, 1, EFFICIENTNET_BN_EPS, silu)?;
    let mut block = 0;
    for &(t, k, s, c, n) in &STAGES {
        for i in 0..n {
            let stride = if i == 0 { s } else { 1 };
            let name = format!("mb{block}");
            let cin = b.channels(&x);
            let mut y = x.clone();
            if t != 1 {
                y = b.conv_bn(&format!("{name}.expand"), &y, cin * t, 1, 1, 1, EFFICIENTNET_BN_EPS, silu)?;
            }
            let dw = b.depthwise(&format!("{name}.dw.conv"), &y, k, stride, Padding::Explicit((k - 1) / 2))?;
            let dw = b.bn(&format!("{name}.dw.bn"), &dw, EFFICIENTNET_BN_EPS)?;
            y = b.act(&format!("{name}.dw.act"), &dw, NodeKind::SiLU)?;
            y = b.squeeze_excite(&format!("{name}.se"), &y, (cin / 4).max(1))?;
            y = b.conv_bn(&format!("{name}.project"), &y, c, 1, 1, 1, EFFICIENTNET_BN_EPS, None)?;
            x = if stride == 1 && cin == c {
                b.add(&format!("{name}.add"), &y, &x)?
            } else {
                y
            };
            block += 1;
        }
    }
    x = b.conv_bn("head", &x, 1280, 1, 1, 1, EFFICIENTNET_BN_EPS, silu)?;
    x = b.pool("gap", &x, NodeKind::GlobalAvgPool)?;
    let classes = b.graph.meta.num_classes;
    b.fc("fc", &x, classes)
}

fn tiny_cnn(b: &mut Builder, cfg: TinyConfig) -> Result<String> {
    let mut x = INPUT_ID.to_string();
    for stage in 0..cfg.depth {
        let name = format!("stage{stage}");
        let cout = cfg.width << stage;
        let conv = b.conv(
            &format!("{name}.conv"),
            &x,
            cout,
            3,
            1,
            Padding::Same,
            1,
            !cfg.batch_norm,
        )?;
        x = if cfg.batch_norm {
            b.bn(&format!("{name}.bn"), &conv, 1e-5)?
        } else {
            conv
        };
        x = b.act(&format!("{name}.relu"), &x, NodeKind::ReLU)?;
        let pool = NodeKind::MaxPool {
            k: 2,
            stride: 2,
            pad: Padding::Valid,
        };
        x = b.pool(&format!("{name}.pool"), &x, pool)?;
    }
    x = b.pool("gap", &x, NodeKind::GlobalAvgPool)?;
    let classes = b.graph.meta.num_classes;
    b.fc("fc", &x, classes)
}
