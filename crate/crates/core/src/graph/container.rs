//! The `.eqm` model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EQM1" | u32 header length | header text | zero pad to 8 | payload
//! ```
//!
//! The header is line-oriented text. Each line starts with a record type
//! followed by `key=value` tokens:
//!
//! ```text
//! meta family=tiny_cnn classes=4 quant=none names=-
//! input shape=1,32,32,3 dtype=f32
//! outputs softmax
//! node id=stage0.conv kind=conv2d inputs=input kh=3 kw=3 stride=1 pad=same groups=1 bias=false
//! tensor name=stage0.conv.0 dtype=f32 shape=3,3,3,8 offset=0 len=864
//! end
//! ```
//!
//! Tensor records follow their node in slot order. Quantized tensors and
//! full-int activations add `qaxis`, `qsym`, `scales` and `zps` tokens.
//! Each tensor buffer starts on an 8-byte boundary of the payload, and the
//! payload is padded to a multiple of 8.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{Graph, GraphMeta, InputSpec, Node, NodeKind, Padding, QuantTag};
use crate::error::{ContainerError, Error, Result};
use crate::tensor::{DType, Granularity, QuantParams, Tensor};

pub const MAGIC: &[u8; 4] = b"EQM1";
const ALIGN: usize = 8;

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn join<T: std::fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for (i, it) in items.into_iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{it}");
    }
    s
}

/// Percent-escapes everything outside `[A-Za-z0-9_.-]`.
fn escape(s: &str) -> String {
    let mut out = String::new();
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-') {
            out.push(b as char);
        } else {
            let _ = write!(out, "%{b:02X}");
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

fn write_qparams(line: &mut String, qp: &QuantParams) {
    let axis = match qp.granularity() {
        Granularity::PerTensor => "none".to_string(),
        Granularity::PerChannel { axis } => axis.to_string(),
    };
    // `{:?}` on f32 prints the shortest string that parses back to the same bits
    let scales = join(qp.scales().iter().map(|s| format!("{s:?}")));
    let _ = write!(
        line,
        " qaxis={axis} qsym={} scales={scales} zps={}",
        qp.is_symmetric() as u8,
        join(qp.zero_points())
    );
}

fn write_kind_attrs(line: &mut String, kind: &NodeKind) {
    let _ = match *kind {
        NodeKind::Conv2D {
            kh,
            kw,
            stride,
            pad,
            groups,
            has_bias,
        } => write!(line, " kh={kh} kw={kw} stride={stride} pad={pad} groups={groups} bias={has_bias}"),
        NodeKind::DepthwiseConv2D {
            kh,
            kw,
            stride,
            pad,
            has_bias,
        } => write!(line, " kh={kh} kw={kw} stride={stride} pad={pad} bias={has_bias}"),
        NodeKind::BatchNorm { eps } => write!(line, " eps={eps:?}"),
        NodeKind::MaxPool { k, stride, pad } | NodeKind::AvgPool { k, stride, pad } => {
            write!(line, " k={k} stride={stride} pad={pad}")
        }
        NodeKind::Concat { axis } => write!(line, " axis={axis}"),
        NodeKind::SqueezeExcite { reduced } => write!(line, " reduced={reduced}"),
        _ => Ok(()),
    };
}

/// Header text plus payload offset of every tensor, in node/slot order.
fn layout(g: &Graph) -> (String, Vec<usize>, usize) {
    let mut header = String::from("EQM1 container\n");
    let names = if g.meta.class_names.is_empty() {
        "-".to_string()
    } else {
        join(g.meta.class_names.iter().map(|n| escape(n)))
    };
    let _ = writeln!(
        header,
        "meta family={} classes={} quant={} names={names}",
        g.meta.family, g.meta.num_classes, g.meta.quant
    );
    let _ = writeln!(header, "input shape={} dtype={}", join(g.input.shape), g.input.dtype);
    let _ = writeln!(header, "outputs {}", join(&g.outputs));
    let mut offsets = Vec::new();
    let mut cursor = 0;
    for node in &g.nodes {
        let mut line = format!("node id={} kind={} inputs={}", node.id, node.kind.name(), join(&node.inputs));
        write_kind_attrs(&mut line, &node.kind);
        if let Some(qp) = &node.out_qparams {
            write_qparams(&mut line, qp);
        }
        header.push_str(&line);
        header.push('\n');
        for (slot, t) in node.weights.iter().enumerate() {
            let mut line = format!(
                "tensor name={} dtype={} shape={} offset={cursor} len={}",
                node.weight_name(slot),
                t.dtype(),
                join(t.shape()),
                t.byte_len()
            );
            if let Some(qp) = t.qparams() {
                write_qparams(&mut line, qp);
            }
            header.push_str(&line);
            header.push('\n');
            offsets.push(cursor);
            cursor = align(cursor + t.byte_len());
        }
    }
    header.push_str("end\n");
    (header, offsets, cursor)
}

/// Byte length `serialize(g)` would produce, without building the payload.
pub fn serialized_len(g: &Graph) -> usize {
    let (header, _, payload) = layout(g);
    align(8 + header.len()) + payload
}

pub fn serialize(g: &Graph) -> Vec<u8> {
    let (header, offsets, payload_len) = layout(g);
    let start = align(8 + header.len());
    let mut out = Vec::with_capacity(start + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.resize(start, 0);
    let tensors = g.nodes.iter().flat_map(|n| &n.weights);
    for (t, off) in tensors.zip(offsets) {
        out.resize(start + off, 0);
        out.extend_from_slice(&t.to_le_bytes());
    }
    out.resize(start + payload_len, 0);
    out
}

struct Line<'a> {
    number: usize,
    kind: &'a str,
    fields: HashMap<&'a str, &'a str>,
    positional: Vec<&'a str>,
}

impl<'a> Line<'a> {
    fn parse(number: usize, text: &'a str) -> Self {
        let mut tokens = text.split_whitespace();
        let kind = tokens.next().unwrap_or("");
        let mut fields = HashMap::new();
        let mut positional = Vec::new();
        for tok in tokens {
            match tok.split_once('=') {
                Some((k, v)) => {
                    fields.insert(k, v);
                }
                None => positional.push(tok),
            }
        }
        Line {
            number,
            kind,
            fields,
            positional,
        }
    }

    fn err(&self, message: impl Into<String>) -> ContainerError {
        ContainerError::Header {
            line: self.number,
            message: message.into(),
        }
    }

    fn get(&self, key: &str) -> Result<&'a str, ContainerError> {
        self.fields
            .get(key)
            .copied()
            .ok_or_else(|| self.err(format!("missing `{key}`")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T, ContainerError> {
        let v = self.get(key)?;
        v.parse().map_err(|_| self.err(format!("bad value `{v}` for `{key}`")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, ContainerError> {
        let v = self.get(key)?;
        if v.is_empty() {
            return Ok(vec![]);
        }
        v.split(',')
            .map(|x| x.parse().map_err(|_| self.err(format!("bad list item `{x}` in `{key}`"))))
            .collect()
    }

    fn flag(&self, key: &str) -> Result<bool, ContainerError> {
        match self.get(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(self.err(format!("bad boolean `{v}` for `{key}`"))),
        }
    }

    fn padding(&self) -> Result<Padding, ContainerError> {
        self.get("pad")?.parse::<Padding>().map_err(|e| self.err(e))
    }

    fn qparams(&self) -> Result<Option<QuantParams>, ContainerError> {
        let Some(axis) = self.fields.get("qaxis") else {
            return Ok(None);
        };
        let granularity = match *axis {
            "none" => Granularity::PerTensor,
            a => Granularity::PerChannel {
                axis: a.parse().map_err(|_| self.err(format!("bad qaxis `{a}`")))?,
            },
        };
        let symmetric = self.get("qsym")? == "1";
        QuantParams::new(granularity, self.list("scales")?, self.list("zps")?, symmetric)
            .map(Some)
            .map_err(|e| self.err(e.to_string()))
    }

    fn node_kind(&self) -> Result<NodeKind, ContainerError> {
        Ok(match self.get("kind")? {
            "input" => NodeKind::Input,
            "conv2d" => NodeKind::Conv2D {
                kh: self.num("kh")?,
                kw: self.num("kw")?,
                stride: self.num("stride")?,
                pad: self.padding()?,
                groups: self.num("groups")?,
                has_bias: self.flag("bias")?,
            },
            "depthwise_conv2d" => NodeKind::DepthwiseConv2D {
                kh: self.num("kh")?,
                kw: self.num("kw")?,
                stride: self.num("stride")?,
                pad: self.padding()?,
                has_bias: self.flag("bias")?,
            },
            "fully_connected" => NodeKind::FullyConnected,
            "batch_norm" => NodeKind::BatchNorm { eps: self.num("eps")? },
            "relu" => NodeKind::ReLU,
            "relu6" => NodeKind::ReLU6,
            "silu" => NodeKind::SiLU,
            "max_pool" => NodeKind::MaxPool {
                k: self.num("k")?,
                stride: self.num("stride")?,
                pad: self.padding()?,
            },
            "avg_pool" => NodeKind::AvgPool {
                k: self.num("k")?,
                stride: self.num("stride")?,
                pad: self.padding()?,
            },
            "global_avg_pool" => NodeKind::GlobalAvgPool,
            "add" => NodeKind::Add,
            "concat" => NodeKind::Concat { axis: self.num("axis")? },
            "softmax" => NodeKind::Softmax,
            "quantize" => NodeKind::Quantize,
            "dequantize" => NodeKind::Dequantize,
            "squeeze_excite" => NodeKind::SqueezeExcite {
                reduced: self.num("reduced")?,
            },
            other => return Err(self.err(format!("unknown node kind `{other}`"))),
        })
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<Graph> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ContainerError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        }
        .into());
    }
    if bytes.len() < 8 {
        return Err(ContainerError::Truncated {
            record: "header length".into(),
        }
        .into());
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = bytes.get(8..8 + header_len).ok_or_else(|| ContainerError::Truncated {
        record: "header".into(),
    })?;
    let header = std::str::from_utf8(header).map_err(|_| ContainerError::Header {
        line: 0,
        message: "header is not UTF-8".into(),
    })?;
    let start = align(8 + header_len);
    let payload = bytes.get(start..).unwrap_or(&[]);

    let mut lines = header.lines().enumerate().map(|(i, l)| Line::parse(i + 1, l));
    let first = lines.next().ok_or(ContainerError::Header {
        line: 1,
        message: "empty header".into(),
    })?;
    if first.kind != "EQM1" {
        return Err(first.err("header must start with `EQM1 container`").into());
    }

    let mut meta: Option<GraphMeta> = None;
    let mut input: Option<InputSpec> = None;
    let mut outputs: Option<Vec<String>> = None;
    let mut nodes: Vec<Node> = Vec::new();
    let mut payload_end = 0;
    let mut ended = false;

    for line in lines {
        if ended {
            return Err(line.err("content after `end`").into());
        }
        match line.kind {
            "meta" => {
                let quant = line.get("quant")?;
                let names = line.get("names")?;
                let class_names = if names == "-" {
                    vec![]
                } else {
                    names
                        .split(',')
                        .map(|n| unescape(n).ok_or_else(|| line.err(format!("bad class name `{n}`"))))
                        .collect::<Result<_, _>>()?
                };
                meta = Some(GraphMeta {
                    family: line.get("family")?.to_string(),
                    num_classes: line.num("classes")?,
                    quant: QuantTag::parse(quant).ok_or_else(|| line.err(format!("unknown quant tag `{quant}`")))?,
                    class_names,
                });
            }
            "input" => {
                let shape: Vec<usize> = line.list("shape")?;
                let shape: [usize; 4] = shape
                    .try_into()
                    .map_err(|_| line.err("input shape must have four dims"))?;
                let dtype = line.get("dtype")?;
                input = Some(InputSpec {
                    shape,
                    dtype: DType::parse(dtype).ok_or_else(|| line.err(format!("unknown dtype `{dtype}`")))?,
                });
            }
            "outputs" => outputs = Some(line.positional.iter().flat_map(|s| s.split(',')).map(String::from).collect()),
            "node" => {
                let kind = line.node_kind()?;
                let mut node = Node {
                    id: line.get("id")?.to_string(),
                    kind,
                    inputs: line.list("inputs")?,
                    weights: vec![],
                    out_qparams: line.qparams()?,
                };
                node.inputs.retain(|s: &String| !s.is_empty());
                nodes.push(node);
            }
            "tensor" => {
                let name = line.get("name")?.to_string();
                let node = nodes.last_mut().ok_or_else(|| line.err("tensor before any node"))?;
                if name != node.weight_name(node.weights.len()) {
                    return Err(line.err(format!(
                        "tensor `{name}` out of order, expected `{}`",
                        node.weight_name(node.weights.len())
                    ))
                    .into());
                }
                let dtype_s = line.get("dtype")?;
                let dtype = DType::parse(dtype_s).ok_or_else(|| line.err(format!("unknown dtype `{dtype_s}`")))?;
                let shape: Vec<usize> = line.list("shape")?;
                let offset: usize = line.num("offset")?;
                let len: usize = line.num("len")?;
                let expected = shape.iter().product::<usize>() * dtype.byte_width();
                if len != expected {
                    return Err(ContainerError::LengthMismatch {
                        record: name,
                        declared: len,
                        expected,
                    }
                    .into());
                }
                let end = offset.checked_add(len).ok_or_else(|| line.err("offset overflow"))?;
                let data = payload
                    .get(offset..end)
                    .ok_or_else(|| ContainerError::Truncated { record: name.clone() })?;
                let tensor = Tensor::from_le_bytes(dtype, shape, data, line.qparams()?)
                    .map_err(|e| line.err(format!("tensor `{name}`: {e}")))?;
                payload_end = payload_end.max(align(end));
                node.weights.push(tensor);
            }
            "end" => ended = true,
            "" => {}
            other => return Err(line.err(format!("unknown record `{other}`")).into()),
        }
    }
    if !ended {
        return Err(ContainerError::Truncated { record: "header end".into() }.into());
    }
    if payload.len() < payload_end {
        return Err(ContainerError::Truncated {
            record: "payload padding".into(),
        }
        .into());
    }
    if payload.len() != payload_end {
        return Err(ContainerError::LengthMismatch {
            record: "payload".into(),
            declared: payload.len(),
            expected: payload_end,
        }
        .into());
    }

    let missing = |what: &str| ContainerError::Header {
        line: 0,
        message: format!("missing `{what}` record"),
    };
    let graph = Graph {
        nodes,
        input: input.ok_or_else(|| missing("input"))?,
        outputs: outputs.ok_or_else(|| missing("outputs"))?,
        meta: meta.ok_or_else(|| missing("meta"))?,
    };
    graph.validate()?;
    Ok(graph)
}

pub fn save(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serialize(g)).map_err(|e| Error::io(path.display(), e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display(), e))?;
    deserialize(&bytes)
}

/// What [`import_weights`] did.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ImportSummary {
    pub copied: Vec<String>,
    /// Tensors present in both graphs whose shape or dtype differ.
    pub skipped: Vec<String>,
}

/// Copies weight tensors from `donor` into `target` by container name,
/// keeping target tensors whose shape or dtype does not match.
pub fn import_weights(target: &mut Graph, donor: &Graph) -> Result<ImportSummary> {
    let mut summary = ImportSummary::default();
    let donors: HashMap<String, &Tensor> = donor
        .nodes
        .iter()
        .flat_map(|n| n.weights.iter().enumerate().map(move |(s, t)| (n.weight_name(s), t)))
        .collect();
    for node in &mut target.nodes {
        for slot in 0..node.weights.len() {
            let name = node.weight_name(slot);
            if let Some(src) = donors.get(&name) {
                let dst = &mut node.weights[slot];
                if src.shape() == dst.shape() && src.dtype() == dst.dtype() {
                    *dst = (*src).clone();
                    summary.copied.push(name);
                } else {
                    summary.skipped.push(name);
                }
            }
        }
    }
    target.validate()?;
    Ok(summary)
}
