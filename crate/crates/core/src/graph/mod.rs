//! Layer-graph model representation.
//!
//! A [`Graph`] is a list of [`Node`]s in topological order. Activations are
//! NHWC everywhere; rank-2 data (after a fully-connected layer) is carried
//! as `[n, 1, 1, features]`.
//!
//! Weight tensors are positional. Per kind, the slots are:
//!
//! | kind | slots |
//! |------|-------|
//! | `Conv2D` | weight `[kh, kw, cin/groups, cout]`, bias `[cout]` if `has_bias` |
//! | `DepthwiseConv2D` | weight `[kh, kw, 1, c]`, bias `[c]` if `has_bias` |
//! | `FullyConnected` | weight `[in, out]`, bias `[out]` |
//! | `BatchNorm` | gamma, beta, running mean, running variance, each `[c]` |
//! | `SqueezeExcite` | w1 `[c, r]`, b1 `[r]`, w2 `[r, c]`, b2 `[c]` |
//!
//! In full-integer graphs, conv and fully-connected nodes carry their bias
//! as i32 and two trailing i32 tensors `[cout]` holding the requantization
//! multiplier and shift for each output channel.

pub mod builders;
pub mod container;
mod fold;

pub use builders::{build_architecture, Family, TinyConfig};
pub use container::{deserialize, import_weights, load, save, serialize, serialized_len, ImportSummary};
pub use fold::fold_batchnorm;

use std::collections::{HashMap, HashSet};
use std::fmt;

use crate::error::{ensure, Error, Result};
use crate::tensor::{DType, QuantParams, Tensor};

pub const INPUT_ID: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// TensorFlow-style: output is `ceil(in / stride)`, extra padding after.
    Same,
    Explicit(usize),
}

impl Padding {
    /// Output extent and leading padding along one spatial axis.
    pub fn resolve(self, input: usize, k: usize, stride: usize) -> Result<(usize, usize)> {
        ensure!(k > 0 && stride > 0, "kernel and stride must be positive");
        match self {
            Padding::Valid => {
                ensure!(input >= k, "kernel {k} larger than input {input}");
                Ok(((input - k) / stride + 1, 0))
            }
            Padding::Explicit(p) => {
                ensure!(p < k, "padding {p} must be smaller than the kernel {k}");
                ensure!(input + 2 * p >= k, "kernel {k} larger than padded input {}", input + 2 * p);
                Ok(((input + 2 * p - k) / stride + 1, p))
            }
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + k).saturating_sub(input);
                Ok((out, total / 2))
            }
        }
    }
}

impl fmt::Display for Padding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Padding::Valid => f.write_str("valid"),
            Padding::Same => f.write_str("same"),
            Padding::Explicit(n) => write!(f, "explicit:{n}"),
        }
    }
}

impl std::str::FromStr for Padding {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "valid" => Ok(Padding::Valid),
            "same" => Ok(Padding::Same),
            _ => s
                .strip_prefix("explicit:")
                .and_then(|n| n.parse().ok())
                .map(Padding::Explicit)
                .ok_or_else(|| format!("bad padding `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeKind {
    /// The graph's single input placeholder.
    Input,
    Conv2D {
        kh: usize,
        kw: usize,
        stride: usize,
        pad: Padding,
        groups: usize,
        has_bias: bool,
    },
    DepthwiseConv2D {
        kh: usize,
        kw: usize,
        stride: usize,
        pad: Padding,
        has_bias: bool,
    },
    /// Flattens `h * w * c` into features.
    FullyConnected,
    BatchNorm {
        eps: f32,
    },
    ReLU,
    ReLU6,
    SiLU,
    MaxPool {
        k: usize,
        stride: usize,
        pad: Padding,
    },
    /// Averages over in-bounds elements only.
    AvgPool {
        k: usize,
        stride: usize,
        pad: Padding,
    },
    GlobalAvgPool,
    Add,
    Concat {
        axis: usize,
    },
    Softmax,
    Quantize,
    Dequantize,
    /// Global pool, fc + SiLU, fc + sigmoid, channel-wise rescale.
    SqueezeExcite {
        reduced: usize,
    },
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Conv2D { .. } => "conv2d",
            NodeKind::DepthwiseConv2D { .. } => "depthwise_conv2d",
            NodeKind::FullyConnected => "fully_connected",
            NodeKind::BatchNorm { .. } => "batch_norm",
            NodeKind::ReLU => "relu",
            NodeKind::ReLU6 => "relu6",
            NodeKind::SiLU => "silu",
            NodeKind::MaxPool { .. } => "max_pool",
            NodeKind::AvgPool { .. } => "avg_pool",
            NodeKind::GlobalAvgPool => "global_avg_pool",
            NodeKind::Add => "add",
            NodeKind::Concat { .. } => "concat",
            NodeKind::Softmax => "softmax",
            NodeKind::Quantize => "quantize",
            NodeKind::Dequantize => "dequantize",
            NodeKind::SqueezeExcite { .. } => "squeeze_excite",
        }
    }

    /// Conv, depthwise conv and fully-connected: the nodes int8 passes rewrite.
    pub fn is_matmul(&self) -> bool {
        matches!(
            self,
            NodeKind::Conv2D { .. } | NodeKind::DepthwiseConv2D { .. } | NodeKind::FullyConnected
        )
    }

    pub fn has_bias(&self) -> bool {
        match self {
            NodeKind::Conv2D { has_bias, .. } | NodeKind::DepthwiseConv2D { has_bias, .. } => {
                *has_bias
            }
            NodeKind::FullyConnected => true,
            _ => false,
        }
    }

    /// Leading weight slots that count as trainable parameters.
    pub fn trainable_slots(&self) -> usize {
        match self {
            NodeKind::Conv2D { .. } | NodeKind::DepthwiseConv2D { .. } => 1 + self.has_bias() as usize,
            NodeKind::FullyConnected | NodeKind::BatchNorm { .. } => 2,
            NodeKind::SqueezeExcite { .. } => 4,
            _ => 0,
        }
    }

    /// Number of weight tensors a node of this kind holds.
    pub fn weight_slots(&self, quant: QuantTag) -> usize {
        match self {
            NodeKind::BatchNorm { .. } => 4,
            k if k.is_matmul() && quant == QuantTag::FullInt => k.trainable_slots() + 2,
            k => k.trainable_slots(),
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            NodeKind::Input => Some(0),
            NodeKind::Add => Some(2),
            NodeKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    pub inputs: Vec<String>,
    pub weights: Vec<Tensor>,
    /// Output activation qparams, present only in full-integer graphs.
    pub out_qparams: Option<QuantParams>,
}

impl Node {
    pub fn new(id: impl Into<String>, kind: NodeKind, inputs: &[&str], weights: Vec<Tensor>) -> Self {
        Node {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            weights,
            out_qparams: None,
        }
    }

    pub fn param_count(&self) -> u64 {
        self.weights
            .iter()
            .take(self.kind.trainable_slots())
            .map(|t| t.numel() as u64)
            .sum()
    }

    /// Name under which weight slot `slot` is stored in a container.
    pub fn weight_name(&self, slot: usize) -> String {
        format!("{}.{slot}", self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantTag {
    None,
    Fp16,
    Dynamic,
    FullInt,
}

impl QuantTag {
    pub fn name(self) -> &'static str {
        match self {
            QuantTag::None => "none",
            QuantTag::Fp16 => "fp16",
            QuantTag::Dynamic => "dynamic",
            QuantTag::FullInt => "full-int",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" | "f32" => QuantTag::None,
            "fp16" => QuantTag::Fp16,
            "dynamic" => QuantTag::Dynamic,
            "full-int" | "full" => QuantTag::FullInt,
            _ => return None,
        })
    }
}

impl fmt::Display for QuantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputSpec {
    /// `[n, h, w, c]`; `n` is nominal, any batch size is accepted at run time.
    pub shape: [usize; 4],
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphMeta {
    pub family: String,
    pub num_classes: usize,
    pub quant: QuantTag,
    /// Optional human-readable labels, one per class.
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub input: InputSpec,
    pub outputs: Vec<String>,
    pub meta: GraphMeta,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ':' | '/'))
}

impl Graph {
    /// An empty graph holding only the input placeholder.
    pub fn new(input: InputSpec, meta: GraphMeta) -> Self {
        Graph {
            nodes: vec![Node::new(INPUT_ID, NodeKind::Input, &[], vec![])],
            input,
            outputs: vec![],
            meta,
        }
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn index_map(&self) -> HashMap<&str, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect()
    }

    /// Ids of nodes that read the output of `id`.
    pub fn consumers(&self, id: &str) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.inputs.iter().any(|i| i == id))
            .map(|n| n.id.as_str())
            .collect()
    }

    pub fn param_count(&self) -> u64 {
        self.nodes.iter().map(Node::param_count).sum()
    }

    /// Total weight elements, trainable or not.
    pub fn weight_elements(&self) -> u64 {
        self.nodes
            .iter()
            .flat_map(|n| &n.weights)
            .map(|t| t.numel() as u64)
            .sum()
    }

    pub fn output_id(&self) -> Result<&str> {
        match self.outputs.as_slice() {
            [one] => Ok(one),
            other => Err(Error::invalid(format!(
                "expected exactly one graph output, found {}",
                other.len()
            ))),
        }
    }

    /// Checks structural invariants and weight shapes; returns the inferred
    /// per-node output shapes for a batch of one.
    pub fn validate(&self) -> Result<Vec<[usize; 4]>> {
        let mut seen = HashSet::new();
        let mut inputs = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            ensure!(valid_id(&node.id), "invalid node id `{}`", node.id);
            ensure!(seen.insert(node.id.as_str()), "duplicate node id `{}`", node.id);
            if node.kind == NodeKind::Input {
                inputs += 1;
                ensure!(i == 0, "input placeholder must be the first node");
            }
            if let Some(n) = node.kind.arity() {
                ensure!(
                    node.inputs.len() == n,
                    "node `{}` ({}) takes {n} inputs, has {}",
                    node.id,
                    node.kind.name(),
                    node.inputs.len()
                );
            } else {
                ensure!(!node.inputs.is_empty(), "node `{}` has no inputs", node.id);
            }
            for input in &node.inputs {
                ensure!(
                    seen.contains(input.as_str()) && input != &node.id,
                    "node `{}` reads `{input}`, which is not an earlier node",
                    node.id
                );
            }
            let want = node.kind.weight_slots(self.meta.quant);
            ensure!(
                node.weights.len() == want,
                "node `{}` ({}) needs {want} weight tensors, has {}",
                node.id,
                node.kind.name(),
                node.weights.len()
            );
            if node.out_qparams.is_some() {
                ensure!(
                    self.meta.quant == QuantTag::FullInt,
                    "node `{}` carries activation qparams outside a full-int graph",
                    node.id
                );
            }
        }
        ensure!(inputs == 1, "graph needs exactly one input placeholder, found {inputs}");
        ensure!(!self.outputs.is_empty(), "graph declares no outputs");
        for out in &self.outputs {
            ensure!(seen.contains(out.as_str()), "output `{out}` is not a node");
        }
        ensure!(self.meta.num_classes >= 1, "num_classes must be positive");
        ensure!(
            !self.meta.family.is_empty() && !self.meta.family.contains(char::is_whitespace),
            "family name must be a non-empty word"
        );
        ensure!(
            self.input.shape.iter().all(|&d| d > 0),
            "input shape must be positive, got {:?}",
            self.input.shape
        );
        self.check_reachable()?;
        self.infer_shapes()
    }

    fn check_reachable(&self) -> Result<()> {
        let mut reach: HashSet<&str> = HashSet::from([INPUT_ID]);
        for node in &self.nodes[1..] {
            if node.inputs.iter().any(|i| reach.contains(i.as_str())) {
                reach.insert(&node.id);
            } else {
                return Err(Error::invalid(format!(
                    "node `{}` is not reachable from the input",
                    node.id
                )));
            }
        }
        Ok(())
    }

    /// Output shape of every node (batch of one), also checking that weight
    /// shapes agree with the incoming activations.
    pub fn infer_shapes(&self) -> Result<Vec<[usize; 4]>> {
        let index = self.index_map();
        let mut shapes: Vec<[usize; 4]> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<[usize; 4]> = node
                .inputs
                .iter()
                .map(|i| {
                    index
                        .get(i.as_str())
                        .and_then(|&j| shapes.get(j).copied())
                        .ok_or_else(|| Error::invalid(format!("unknown input `{i}` of `{}`", node.id)))
                })
                .collect::<Result<_>>()?;
            let shape = node_output_shape(node, &ins, self.input.shape)
                .map_err(|e| Error::invalid(format!("node `{}`: {e}", node.id)))?;
            shapes.push(shape);
        }
        Ok(shapes)
    }
}

fn wshape(node: &Node, slot: usize) -> std::result::Result<&[usize], String> {
    node.weights
        .get(slot)
        .map(|t| t.shape())
        .ok_or_else(|| format!("missing weight slot {slot}"))
}

fn check_vec(node: &Node, slot: usize, len: usize) -> std::result::Result<(), String> {
    let s = wshape(node, slot)?;
    if s != [len] {
        return Err(format!("weight slot {slot} has shape {s:?}, expected [{len}]"));
    }
    Ok(())
}

fn check_requant(node: &Node, first: usize, cout: usize) -> std::result::Result<(), String> {
    for slot in first..node.weights.len() {
        check_vec(node, slot, cout)?;
    }
    Ok(())
}

fn node_output_shape(
    node: &Node,
    ins: &[[usize; 4]],
    input_shape: [usize; 4],
) -> std::result::Result<[usize; 4], String> {
    let e = |r: crate::error::Error| r.to_string();
    Ok(match node.kind {
        NodeKind::Input => [1, input_shape[1], input_shape[2], input_shape[3]],
        NodeKind::Conv2D {
            kh,
            kw,
            stride,
            pad,
            groups,
            has_bias,
        } => {
            let [n, h, w, c] = ins[0];
            let ws = wshape(node, 0)?;
            if groups == 0 || c % groups != 0 {
                return Err(format!("{c} input channels not divisible by {groups} groups"));
            }
            if ws.len() != 4 || ws[..3] != [kh, kw, c / groups] || ws[3] % groups != 0 {
                return Err(format!(
                    "weight shape {ws:?} does not match kernel {kh}x{kw}, {c} channels, {groups} groups"
                ));
            }
            let cout = ws[3];
            if has_bias {
                check_vec(node, 1, cout)?;
            }
            check_requant(node, 1 + has_bias as usize, cout)?;
            let (oh, _) = pad.resolve(h, kh, stride).map_err(e)?;
            let (ow, _) = pad.resolve(w, kw, stride).map_err(e)?;
            [n, oh, ow, cout]
        }
        NodeKind::DepthwiseConv2D {
            kh,
            kw,
            stride,
            pad,
            has_bias,
        } => {
            let [n, h, w, c] = ins[0];
            let ws = wshape(node, 0)?;
            if ws != [kh, kw, 1, c] {
                return Err(format!("depthwise weight shape {ws:?}, expected [{kh}, {kw}, 1, {c}]"));
            }
            if has_bias {
                check_vec(node, 1, c)?;
            }
            check_requant(node, 1 + has_bias as usize, c)?;
            let (oh, _) = pad.resolve(h, kh, stride).map_err(e)?;
            let (ow, _) = pad.resolve(w, kw, stride).map_err(e)?;
            [n, oh, ow, c]
        }
        NodeKind::FullyConnected => {
            let [n, h, w, c] = ins[0];
            let ws = wshape(node, 0)?;
            if ws.len() != 2 || ws[0] != h * w * c {
                return Err(format!("fc weight shape {ws:?} does not take {} features", h * w * c));
            }
            check_vec(node, 1, ws[1])?;
            check_requant(node, 2, ws[1])?;
            [n, 1, 1, ws[1]]
        }
        NodeKind::BatchNorm { eps } => {
            if !(eps > 0.0) {
                return Err(format!("batch norm eps must be positive, got {eps}"));
            }
            for slot in 0..4 {
                check_vec(node, slot, ins[0][3])?;
            }
            ins[0]
        }
        NodeKind::SqueezeExcite { reduced } => {
            let c = ins[0][3];
            let shapes = [vec![c, reduced], vec![reduced], vec![reduced, c], vec![c]];
            for (slot, want) in shapes.iter().enumerate() {
                let s = wshape(node, slot)?;
                if s != want.as_slice() {
                    return Err(format!("squeeze-excite slot {slot} has shape {s:?}, expected {want:?}"));
                }
            }
            ins[0]
        }
        NodeKind::ReLU
        | NodeKind::ReLU6
        | NodeKind::SiLU
        | NodeKind::Softmax
        | NodeKind::Quantize
        | NodeKind::Dequantize => ins[0],
        NodeKind::MaxPool { k, stride, pad } | NodeKind::AvgPool { k, stride, pad } => {
            let [n, h, w, c] = ins[0];
            let (oh, _) = pad.resolve(h, k, stride).map_err(e)?;
            let (ow, _) = pad.resolve(w, k, stride).map_err(e)?;
            [n, oh, ow, c]
        }
        NodeKind::GlobalAvgPool => [ins[0][0], 1, 1, ins[0][3]],
        NodeKind::Add => {
            if ins[0] != ins[1] {
                return Err(format!("add operands differ: {:?} vs {:?}", ins[0], ins[1]));
            }
            ins[0]
        }
        NodeKind::Concat { axis } => {
            if !(1..4).contains(&axis) {
                return Err(format!("concat axis {axis} must be 1, 2 or 3"));
            }
            let mut out = ins[0];
            out[axis] = 0;
            for s in ins {
                for d in 0..4 {
                    if d != axis && s[d] != ins[0][d] {
                        return Err(format!("concat operands disagree off-axis: {s:?} vs {:?}", ins[0]));
                    }
                }
                out[axis] += s[axis];
            }
            out
        }
    })
}
