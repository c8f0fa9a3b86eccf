//! Graph execution in four modes.
//!
//! [`Engine::new`] checks the graph against the mode once and resolves every
//! node to a concrete kernel; [`Engine::run`] then evaluates a batch, one
//! sample per rayon task. Each sample runs serially, so outputs do not
//! depend on the number of worker threads.
//!
//! Which kernel a node gets follows from its weights and the value type
//! flowing into it: f32 weights run the float kernels, int8 weights on a
//! float input take the dynamic-range path (activation qparams derived per
//! sample from its own min/max), and int8 weights on an int8 input take the
//! full-integer path with precomputed requantizers.

pub mod fixed_point;
pub mod int8;
pub mod kernels;

use std::borrow::Cow;
use std::fmt;

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Node, NodeKind, QuantTag};
use crate::tensor::{choose_qparams_asymmetric, f16_to_f32, Granularity, Tensor, TensorData};
use fixed_point::Requantizer;
use int8::{Act, AddParams, Rescale};
use kernels::Window;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExecMode {
    F32,
    Fp16,
    DynamicInt8,
    FullInt8,
}

impl ExecMode {
    pub const ALL: [ExecMode; 4] = [ExecMode::F32, ExecMode::Fp16, ExecMode::DynamicInt8, ExecMode::FullInt8];

    /// The mode a graph with this tag must run in.
    pub fn for_tag(tag: QuantTag) -> Self {
        match tag {
            QuantTag::None => ExecMode::F32,
            QuantTag::Fp16 => ExecMode::Fp16,
            QuantTag::Dynamic => ExecMode::DynamicInt8,
            QuantTag::FullInt => ExecMode::FullInt8,
        }
    }

    pub fn tag(self) -> QuantTag {
        match self {
            ExecMode::F32 => QuantTag::None,
            ExecMode::Fp16 => QuantTag::Fp16,
            ExecMode::DynamicInt8 => QuantTag::Dynamic,
            ExecMode::FullInt8 => QuantTag::FullInt,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExecMode::F32 => "f32",
            ExecMode::Fp16 => "fp16",
            ExecMode::DynamicInt8 => "dynamic",
            ExecMode::FullInt8 => "full-int",
        }
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "float32" | "none" => Ok(ExecMode::F32),
            "fp16" | "f16" | "float16" => Ok(ExecMode::Fp16),
            "dynamic" | "dynamic-int8" => Ok(ExecMode::DynamicInt8),
            "full-int" | "full" | "full-int8" | "int8" => Ok(ExecMode::FullInt8),
            other => Err(Error::invalid(format!(
                "unknown execution mode `{other}` (expected f32, fp16, dynamic or full-int)"
            ))),
        }
    }
}

/// Runs `batch` (`[n, h, w, c]` f32) through `g` and returns the output
/// node's values, one row per sample.
pub fn run(g: &Graph, batch: &Tensor, mode: ExecMode) -> Result<Tensor> {
    Engine::new(g, mode)?.run(batch)
}

/// An activation flowing between nodes of one sample.
#[derive(Debug, Clone)]
enum Value {
    F(Vec<f32>),
    Q(Vec<i8>, Act),
}

impl Value {
    fn floats(&self) -> Cow<'_, [f32]> {
        match self {
            Value::F(v) => Cow::Borrowed(v),
            Value::Q(q, act) => Cow::Owned(q.iter().map(|&v| act.dequantize(v)).collect()),
        }
    }

    fn f(&self) -> &[f32] {
        match self {
            Value::F(v) => v,
            Value::Q(..) => unreachable!("domains are checked when the engine is built"),
        }
    }

    fn q(&self) -> (&[i8], Act) {
        match self {
            Value::Q(q, act) => (q, *act),
            Value::F(_) => unreachable!("domains are checked when the engine is built"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Domain {
    Float,
    Int,
}

#[derive(Debug, Clone, Copy)]
enum Geom {
    Conv { win: Window, groups: usize },
    Depthwise { win: Window },
    Fc,
}

#[derive(Debug)]
enum MatWeights<'g> {
    Float {
        w: Cow<'g, [f32]>,
        b: Option<Cow<'g, [f32]>>,
    },
    Dynamic {
        w: &'g [i8],
        scales: Vec<f32>,
        b: Option<Cow<'g, [f32]>>,
    },
    Int {
        w: &'g [i8],
        bias: Vec<i32>,
        req: Vec<Requantizer>,
        out: Act,
    },
}

#[derive(Debug)]
enum Op<'g> {
    Input,
    Mat {
        geom: Geom,
        cin: usize,
        cout: usize,
        w: MatWeights<'g>,
    },
    BatchNorm {
        p: [Cow<'g, [f32]>; 4],
        eps: f32,
    },
    Relu,
    Relu6,
    Silu,
    /// Any elementwise float function in the int8 domain.
    Lut(Box<[i8; 256]>, Act),
    MaxPool(Window),
    AvgPool(Window),
    GlobalAvgPool,
    Add,
    AddInt(AddParams, Act),
    Concat {
        outer: usize,
        inners: Vec<usize>,
    },
    ConcatInt {
        outer: usize,
        inners: Vec<usize>,
        rescale: Vec<Option<Rescale>>,
        out: Act,
    },
    Softmax,
    Quantize(Act),
    Dequantize,
    SqueezeExcite {
        p: [Cow<'g, [f32]>; 4],
        out: Option<Act>,
    },
}

/// A graph resolved against one execution mode, ready to run.
#[derive(Debug)]
pub struct Engine<'g> {
    graph: &'g Graph,
    mode: ExecMode,
    ops: Vec<Op<'g>>,
    inputs: Vec<Vec<usize>>,
    shapes: Vec<[usize; 4]>,
    /// Index of the last node reading each value; the output is never freed.
    last_use: Vec<usize>,
    output: usize,
}

fn floats<'g>(t: &'g Tensor, node: &Node, slot: usize) -> Result<Cow<'g, [f32]>> {
    match t.data() {
        TensorData::F32(v) => Ok(Cow::Borrowed(v)),
        TensorData::F16(bits) => Ok(Cow::Owned(bits.iter().map(|&b| f16_to_f32(b)).collect())),
        _ => Err(Error::invalid(format!(
            "weight `{}` is {}, expected a float tensor",
            node.weight_name(slot),
            t.dtype()
        ))),
    }
}

fn ints<'g>(t: &'g Tensor, node: &Node, slot: usize) -> Result<&'g [i32]> {
    t.as_i32().ok_or_else(|| {
        Error::invalid(format!(
            "weight `{}` is {}, expected i32",
            node.weight_name(slot),
            t.dtype()
        ))
    })
}

fn act_of(node: &Node) -> Result<Act> {
    let qp = node.out_qparams.as_ref().ok_or_else(|| {
        Error::CalibrationRequired(format!("node `{}` has no activation qparams", node.id))
    })?;
    ensure!(
        qp.granularity() == Granularity::PerTensor,
        "activation qparams of `{}` must be per-tensor",
        node.id
    );
    Ok(Act {
        scale: qp.scale(),
        zp: qp.zero_point(),
    })
}

/// Per-output-channel scales of a symmetric int8 weight.
fn weight_scales(t: &Tensor, node: &Node, cout: usize) -> Result<Vec<f32>> {
    let qp = t.qparams().expect("i8 tensors carry qparams");
    ensure!(
        qp.is_symmetric(),
        "int8 weight `{}` must be symmetric",
        node.weight_name(0)
    );
    match qp.granularity() {
        Granularity::PerTensor => Ok(vec![qp.scale(); cout]),
        Granularity::PerChannel { axis } => {
            ensure!(
                axis == t.shape().len() - 1,
                "int8 weight `{}` must be quantized along its output-channel axis",
                node.weight_name(0)
            );
            Ok(qp.scales().to_vec())
        }
    }
}

impl<'g> Engine<'g> {
    pub fn new(graph: &'g Graph, mode: ExecMode) -> Result<Self> {
        ensure!(
            ExecMode::for_tag(graph.meta.quant) == mode,
            "graph is tagged `{}` and must run in {} mode, not {mode}",
            graph.meta.quant,
            ExecMode::for_tag(graph.meta.quant)
        );
        let shapes = graph.validate()?;
        let index = graph.index_map();
        let inputs: Vec<Vec<usize>> = graph
            .nodes
            .iter()
            .map(|n| n.inputs.iter().map(|i| index[i.as_str()]).collect())
            .collect();
        let output = index[graph.output_id()?];

        let mut ops = Vec::with_capacity(graph.nodes.len());
        let mut domains: Vec<Domain> = Vec::with_capacity(graph.nodes.len());
        let mut acts: Vec<Option<Act>> = Vec::with_capacity(graph.nodes.len());
        for (i, node) in graph.nodes.iter().enumerate() {
            let in_shapes: Vec<[usize; 4]> = inputs[i].iter().map(|&j| shapes[j]).collect();
            let in_domains: Vec<Domain> = inputs[i].iter().map(|&j| domains[j]).collect();
            let in_acts: Vec<Option<Act>> = inputs[i].iter().map(|&j| acts[j]).collect();
            let (op, domain, act) = prepare(node, mode, &in_shapes, &in_domains, &in_acts)
                .map_err(|e| match e {
                    Error::InvalidArgument(m) => Error::invalid(format!("node `{}`: {m}", node.id)),
                    other => other,
                })?;
            ops.push(op);
            domains.push(domain);
            acts.push(act);
        }

        let mut last_use = vec![0usize; graph.nodes.len()];
        for (i, ins) in inputs.iter().enumerate() {
            for &j in ins {
                last_use[j] = i;
            }
        }
        last_use[output] = usize::MAX;
        Ok(Engine {
            graph,
            mode,
            ops,
            inputs,
            shapes,
            last_use,
            output,
        })
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Elements per sample of the output node.
    pub fn output_len(&self) -> usize {
        self.shapes[self.output].iter().skip(1).product()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let [_, h, w, c] = self.graph.input.shape;
        let shape = batch.shape();
        ensure!(
            batch.dtype() == crate::tensor::DType::F32,
            "input batch must be f32, got {}",
            batch.dtype()
        );
        ensure!(
            shape.len() == 4 && shape[1..] == [h, w, c],
            "input batch shape {shape:?} does not match the graph input [n, {h}, {w}, {c}]"
        );
        Ok(shape[0])
    }

    /// Evaluates a batch; the result is `[n, output_len]` f32.
    pub fn run(&self, batch: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        let x = batch.as_f32().expect("checked dtype");
        let per = x.len() / n;
        let rows: Vec<Vec<f32>> = x
            .par_chunks_exact(per)
            .map(|sample| self.run_sample(sample, &mut |_, _| {}))
            .collect();
        let k = self.output_len();
        Tensor::from_f32(vec![n, k], rows.concat())
    }

    /// Runs one sample serially, calling `observe(node_id, values)` on the
    /// input and on every node output (dequantized if int8).
    pub fn trace(&self, sample: &[f32], observe: &mut dyn FnMut(&str, &[f32])) -> Result<Vec<f32>> {
        let [_, h, w, c] = self.graph.input.shape;
        ensure!(
            sample.len() == h * w * c,
            "sample has {} values, the graph takes {h}x{w}x{c}",
            sample.len()
        );
        Ok(self.run_sample(sample, &mut |i, v| observe(&self.graph.nodes[i].id, &v.floats())))
    }

    fn run_sample(&self, sample: &[f32], observe: &mut dyn FnMut(usize, &Value)) -> Vec<f32> {
        let mut values: Vec<Option<Value>> = vec![None; self.ops.len()];
        for (i, op) in self.ops.iter().enumerate() {
            let v = {
                let args: Vec<&Value> = self.inputs[i]
                    .iter()
                    .map(|&j| values[j].as_ref().expect("inputs are computed first"))
                    .collect();
                let in_shape = self.inputs[i].first().map(|&j| self.shapes[j]);
                self.exec(op, &args, in_shape, sample)
            };
            observe(i, &v);
            values[i] = Some(v);
            for &j in &self.inputs[i] {
                if self.last_use[j] == i {
                    values[j] = None;
                }
            }
        }
        values[self.output].take().expect("output computed").floats().into_owned()
    }

    fn exec(&self, op: &Op<'g>, args: &[&Value], in_shape: Option<[usize; 4]>, sample: &[f32]) -> Value {
        let channels = in_shape.map_or(0, |s| s[3]);
        match op {
            Op::Input => Value::F(sample.to_vec()),
            Op::Mat { geom, cin, cout, w } => exec_mat(geom, *cin, *cout, w, args[0]),
            Op::BatchNorm { p, eps } => {
                let mut x = args[0].f().to_vec();
                kernels::batch_norm(&mut x, &p[0], &p[1], &p[2], &p[3], *eps);
                Value::F(x)
            }
            Op::Relu => match args[0] {
                Value::F(x) => {
                    let mut x = x.clone();
                    kernels::relu(&mut x);
                    Value::F(x)
                }
                Value::Q(q, act) => {
                    let mut q = q.clone();
                    int8::relu(&mut q, act.zp);
                    Value::Q(q, *act)
                }
            },
            Op::Relu6 => match args[0] {
                Value::F(x) => {
                    let mut x = x.clone();
                    kernels::relu6(&mut x);
                    Value::F(x)
                }
                Value::Q(q, act) => {
                    let mut q = q.clone();
                    int8::relu6(&mut q, *act);
                    Value::Q(q, *act)
                }
            },
            Op::Silu => {
                let mut x = args[0].f().to_vec();
                kernels::silu(&mut x);
                Value::F(x)
            }
            Op::Lut(lut, out) => {
                let mut q = args[0].q().0.to_vec();
                int8::apply_lut(&mut q, lut);
                Value::Q(q, *out)
            }
            Op::MaxPool(win) => match args[0] {
                Value::F(x) => Value::F(kernels::max_pool(x, channels, win)),
                Value::Q(q, act) => Value::Q(int8::max_pool(q, channels, win), *act),
            },
            Op::AvgPool(win) => match args[0] {
                Value::F(x) => Value::F(kernels::avg_pool(x, channels, win)),
                Value::Q(q, act) => Value::Q(int8::avg_pool(q, channels, win), *act),
            },
            Op::GlobalAvgPool => match args[0] {
                Value::F(x) => Value::F(kernels::global_avg_pool(x, channels)),
                Value::Q(q, act) => Value::Q(int8::global_avg_pool(q, channels), *act),
            },
            Op::Add => Value::F(kernels::add(args[0].f(), args[1].f())),
            Op::AddInt(p, out) => Value::Q(int8::add(args[0].q().0, args[1].q().0, p), *out),
            Op::Concat { outer, inners } => {
                let parts: Vec<(&[f32], usize)> = args.iter().map(|a| a.f()).zip(inners.iter().copied()).collect();
                Value::F(kernels::concat(&parts, *outer))
            }
            Op::ConcatInt {
                outer,
                inners,
                rescale,
                out,
            } => {
                let moved: Vec<Cow<'_, [i8]>> = args
                    .iter()
                    .zip(rescale)
                    .map(|(a, r)| match r {
                        None => Cow::Borrowed(a.q().0),
                        Some(r) => Cow::Owned(a.q().0.iter().map(|&v| r.apply(v)).collect()),
                    })
                    .collect();
                let parts: Vec<(&[i8], usize)> = moved.iter().map(|m| &m[..]).zip(inners.iter().copied()).collect();
                Value::Q(kernels::concat(&parts, *outer), *out)
            }
            Op::Softmax => {
                let mut x = args[0].f().to_vec();
                kernels::softmax(&mut x);
                Value::F(x)
            }
            Op::Quantize(act) => Value::Q(args[0].f().iter().map(|&v| act.quantize(v)).collect(), *act),
            Op::Dequantize => Value::F(args[0].floats().into_owned()),
            Op::SqueezeExcite { p, out } => {
                let x = args[0].floats();
                let y = kernels::squeeze_excite(&x, channels, &p[0], &p[1], &p[2], &p[3]);
                match out {
                    None => Value::F(y),
                    Some(act) => Value::Q(y.iter().map(|&v| act.quantize(v)).collect(), *act),
                }
            }
        }
    }
}

fn exec_mat(geom: &Geom, cin: usize, cout: usize, w: &MatWeights<'_>, arg: &Value) -> Value {
    match w {
        MatWeights::Float { w, b } => {
            let x = arg.f();
            let b = b.as_deref();
            Value::F(match geom {
                Geom::Conv { win, groups } => kernels::conv2d(x, cin, w, b, cout, *groups, win),
                Geom::Depthwise { win } => kernels::depthwise_conv2d(x, cin, w, b, win),
                Geom::Fc => kernels::fully_connected(x, w, b.expect("fc has a bias")),
            })
        }
        MatWeights::Dynamic { w, scales, b } => {
            let x = arg.f();
            let (lo, hi) = x
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let qp = choose_qparams_asymmetric(lo, hi).expect("finite activations");
            let act = Act {
                scale: qp.scale(),
                zp: qp.zero_point(),
            };
            let centered: Vec<i16> = x.iter().map(|&v| (act.quantize(v) as i32 - act.zp) as i16).collect();
            let acc = int_accumulate(geom, &centered, cin, w, cout);
            let mult: Vec<f32> = scales.iter().map(|s| s * act.scale).collect();
            let mut out: Vec<f32> = acc
                .chunks_exact(cout)
                .flat_map(|row| row.iter().zip(&mult).map(|(&a, &m)| a as f32 * m))
                .collect();
            if let Some(b) = b {
                for row in out.chunks_exact_mut(cout) {
                    row.iter_mut().zip(b.iter()).for_each(|(o, &b)| *o += b);
                }
            }
            Value::F(out)
        }
        MatWeights::Int { w, bias, req, out } => {
            let (q, act) = arg.q();
            let acc = int_accumulate(geom, &int8::center(q, act.zp), cin, w, cout);
            Value::Q(int8::requantize(&acc, bias, req, out.zp), *out)
        }
    }
}

fn int_accumulate(geom: &Geom, a: &[i16], cin: usize, w: &[i8], cout: usize) -> Vec<i32> {
    match geom {
        Geom::Conv { win, groups } => int8::conv2d(a, cin, w, cout, *groups, win),
        Geom::Depthwise { win } => int8::depthwise_conv2d(a, cin, w, win),
        Geom::Fc => int8::gemm_i16_i8(1, a.len(), cout, a, w),
    }
}

fn same_domain(node: &Node, domains: &[Domain]) -> Result<Domain> {
    let d = domains[0];
    ensure!(
        domains.iter().all(|&x| x == d),
        "inputs of `{}` mix float and int8 values",
        node.id
    );
    Ok(d)
}

/// Qparams of a node whose int8 output reuses its input grid.
fn pass_through(node: &Node, input: Act) -> Result<Act> {
    if node.out_qparams.is_some() {
        let act = act_of(node)?;
        if act != input {
            return Err(Error::InvalidState(format!(
                "node `{}` ({}) keeps its input's qparams but declares different ones",
                node.id,
                node.kind.name()
            )));
        }
    }
    Ok(input)
}

type Prepared<'g> = (Op<'g>, Domain, Option<Act>);

fn prepare<'g>(
    node: &'g Node,
    mode: ExecMode,
    shapes: &[[usize; 4]],
    domains: &[Domain],
    acts: &[Option<Act>],
) -> Result<Prepared<'g>> {
    use Domain::{Float, Int};
    let float_op = |op: Op<'g>| Ok((op, Float, None));
    if node.kind == NodeKind::Input {
        return float_op(Op::Input);
    }
    let domain = same_domain(node, domains)?;
    let in_act = acts[0];
    let p4 = || -> Result<[Cow<'g, [f32]>; 4]> {
        Ok([
            floats(&node.weights[0], node, 0)?,
            floats(&node.weights[1], node, 1)?,
            floats(&node.weights[2], node, 2)?,
            floats(&node.weights[3], node, 3)?,
        ])
    };
    let [_, h, w, _] = shapes[0];
    match node.kind {
        NodeKind::Input => unreachable!(),
        NodeKind::Conv2D { .. } | NodeKind::DepthwiseConv2D { .. } | NodeKind::FullyConnected => {
            prepare_mat(node, mode, shapes[0], domain, in_act)
        }
        NodeKind::BatchNorm { eps } => {
            ensure!(domain == Float, "batch norm `{}` cannot run on int8 values; fold it first", node.id);
            float_op(Op::BatchNorm { p: p4()?, eps })
        }
        NodeKind::ReLU | NodeKind::ReLU6 => {
            let op = if node.kind == NodeKind::ReLU { Op::Relu } else { Op::Relu6 };
            match domain {
                Float => float_op(op),
                Int => Ok((op, Int, Some(pass_through(node, in_act.expect("int values carry qparams"))?))),
            }
        }
        NodeKind::SiLU => match domain {
            Float => float_op(Op::Silu),
            Int => {
                let out = act_of(node)?;
                let lut = int8::lookup_table(in_act.expect("int values carry qparams"), out, kernels::silu_scalar);
                Ok((Op::Lut(Box::new(lut), out), Int, Some(out)))
            }
        },
        NodeKind::MaxPool { k, stride, pad } | NodeKind::AvgPool { k, stride, pad } => {
            let win = Window::new(h, w, k, k, stride, pad)?;
            let op = if matches!(node.kind, NodeKind::MaxPool { .. }) {
                Op::MaxPool(win)
            } else {
                Op::AvgPool(win)
            };
            match domain {
                Float => float_op(op),
                Int => Ok((op, Int, Some(pass_through(node, in_act.expect("int values carry qparams"))?))),
            }
        }
        NodeKind::GlobalAvgPool => match domain {
            Float => float_op(Op::GlobalAvgPool),
            Int => Ok((
                Op::GlobalAvgPool,
                Int,
                Some(pass_through(node, in_act.expect("int values carry qparams"))?),
            )),
        },
        NodeKind::Add => match domain {
            Float => float_op(Op::Add),
            Int => {
                let out = act_of(node)?;
                let p = AddParams::new(acts[0].expect("int"), acts[1].expect("int"), out)?;
                Ok((Op::AddInt(p, out), Int, Some(out)))
            }
        },
        NodeKind::Concat { axis } => {
            ensure!(axis == 3, "concat `{}` only supports the channel axis (3), got {axis}", node.id);
            let outer = h * w;
            let inners: Vec<usize> = shapes.iter().map(|s| s[3]).collect();
            match domain {
                Float => float_op(Op::Concat { outer, inners }),
                Int => {
                    let out = act_of(node)?;
                    let rescale = acts
                        .iter()
                        .map(|a| Rescale::new(a.expect("int"), out))
                        .collect::<Result<_>>()?;
                    Ok((
                        Op::ConcatInt {
                            outer,
                            inners,
                            rescale,
                            out,
                        },
                        Int,
                        Some(out),
                    ))
                }
            }
        }
        NodeKind::Softmax => {
            ensure!(
                domain == Float,
                "softmax `{}` needs float input; a Dequantize node must precede it",
                node.id
            );
            float_op(Op::Softmax)
        }
        NodeKind::Quantize => {
            ensure!(domain == Float, "quantize `{}` needs float input", node.id);
            let out = act_of(node)?;
            Ok((Op::Quantize(out), Int, Some(out)))
        }
        NodeKind::Dequantize => {
            ensure!(domain == Int, "dequantize `{}` needs int8 input", node.id);
            float_op(Op::Dequantize)
        }
        NodeKind::SqueezeExcite { .. } => {
            match domain {
                Float => float_op(Op::SqueezeExcite { p: p4()?, out: None }),
                Int => {
                    let out = act_of(node)?;
                    Ok((Op::SqueezeExcite { p: p4()?, out: Some(out) }, Int, Some(out)))
                }
            }
        }
    }
}

fn prepare_mat<'g>(
    node: &'g Node,
    mode: ExecMode,
    in_shape: [usize; 4],
    domain: Domain,
    in_act: Option<Act>,
) -> Result<Prepared<'g>> {
    let [_, h, w, c] = in_shape;
    let weight = &node.weights[0];
    let (geom, cin, cout) = match node.kind {
        NodeKind::Conv2D {
            kh,
            kw,
            stride,
            pad,
            groups,
            ..
        } => (
            Geom::Conv {
                win: Window::new(h, w, kh, kw, stride, pad)?,
                groups,
            },
            c,
            weight.shape()[3],
        ),
        NodeKind::DepthwiseConv2D { kh, kw, stride, pad, .. } => (
            Geom::Depthwise {
                win: Window::new(h, w, kh, kw, stride, pad)?,
            },
            c,
            c,
        ),
        _ => (Geom::Fc, h * w * c, weight.shape()[1]),
    };
    let has_bias = node.kind.has_bias();
    let mat = |weights| Op::Mat { geom, cin, cout, w: weights };

    match (weight.as_i8(), domain) {
        (None, Domain::Float) => {
            ensure!(
                mode != ExecMode::FullInt8,
                "`{}` has float weights inside a full-int graph",
                node.id
            );
            let weights = MatWeights::Float {
                w: floats(weight, node, 0)?,
                b: has_bias.then(|| floats(&node.weights[1], node, 1)).transpose()?,
            };
            Ok((mat(weights), Domain::Float, None))
        }
        (Some(q), Domain::Float) => {
            ensure!(
                mode == ExecMode::DynamicInt8,
                "`{}` has int8 weights but a float input outside dynamic mode",
                node.id
            );
            let weights = MatWeights::Dynamic {
                w: q,
                scales: weight_scales(weight, node, cout)?,
                b: has_bias.then(|| floats(&node.weights[1], node, 1)).transpose()?,
            };
            Ok((mat(weights), Domain::Float, None))
        }
        (Some(q), Domain::Int) => {
            ensure!(mode == ExecMode::FullInt8, "`{}` receives int8 values outside full-int mode", node.id);
            weight_scales(weight, node, cout)?;
            let n = node.weights.len();
            let bias = if has_bias {
                ints(&node.weights[1], node, 1)?.to_vec()
            } else {
                vec![0; cout]
            };
            let m0 = ints(&node.weights[n - 2], node, n - 2)?;
            let shift = ints(&node.weights[n - 1], node, n - 1)?;
            let req = m0
                .iter()
                .zip(shift)
                .map(|(&m, &s)| Requantizer::decode(m, s))
                .collect::<Result<Vec<_>>>()?;
            ensure!(in_act.is_some(), "input of `{}` has no qparams", node.id);
            let out = act_of(node)?;
            let weights = MatWeights::Int { w: q, bias, req, out };
            Ok((mat(weights), Domain::Int, Some(out)))
        }
        (None, Domain::Int) => Err(Error::invalid(format!(
            "`{}` has float weights but receives int8 values",
            node.id
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_architecture, Family, GraphMeta, InputSpec, TinyConfig, INPUT_ID};
    use crate::tensor::DType;

    fn tiny() -> Graph {
        build_architecture(Family::TinyCnn(TinyConfig::default()), 4, (16, 16), 3).unwrap()
    }

    fn batch(n: usize, h: usize, w: usize, c: usize, seed: u32) -> Tensor {
        let data = (0..n * h * w * c)
            .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) >> 8) as f32 / 16777216.0)
            .collect();
        Tensor::from_f32(vec![n, h, w, c], data).unwrap()
    }

    #[test]
    fn rows_sum_to_one() {
        let g = tiny();
        let out = run(&g, &batch(3, 16, 16, 3, 1), ExecMode::F32).unwrap();
        assert_eq!(out.shape(), &[3, 4]);
        for row in out.as_f32().unwrap().chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn mode_must_match_tag() {
        let g = tiny();
        let err = Engine::new(&g, ExecMode::FullInt8).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
    }

    #[test]
    fn batch_shape_is_checked() {
        let g = tiny();
        let e = Engine::new(&g, ExecMode::F32).unwrap();
        assert!(e.run(&batch(1, 8, 16, 3, 0)).is_err());
        let bad = Tensor::from_f32(vec![1, 16 * 16 * 3], vec![0.0; 768]).unwrap();
        assert!(e.run(&bad).is_err());
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let g = tiny();
        let x = batch(6, 16, 16, 3, 7);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| run(&g, &x, ExecMode::F32)).unwrap();
        let b = three.install(|| run(&g, &x, ExecMode::F32)).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn pointwise_identity_gives_uniform_softmax() {
        let mut g = Graph::new(
            InputSpec {
                shape: [1, 1, 1, 4],
                dtype: DType::F32,
            },
            GraphMeta {
                family: "probe".into(),
                num_classes: 4,
                quant: QuantTag::None,
                class_names: vec![],
            },
        );
        let mut eye = vec![0.0f32; 16];
        (0..4).for_each(|i| eye[i * 5] = 1.0);
        g.nodes.push(Node::new(
            "conv",
            NodeKind::Conv2D {
                kh: 1,
                kw: 1,
                stride: 1,
                pad: crate::graph::Padding::Valid,
                groups: 1,
                has_bias: false,
            },
            &[INPUT_ID],
            vec![Tensor::from_f32(vec![1, 1, 4, 4], eye).unwrap()],
        ));
        g.nodes.push(Node::new("softmax", NodeKind::Softmax, &["conv"], vec![]));
        g.outputs = vec!["softmax".into()];
        let x = Tensor::from_f32(vec![1, 1, 1, 4], vec![2.5; 4]).unwrap();
        let out = run(&g, &x, ExecMode::F32).unwrap();
        assert_eq!(out.as_f32().unwrap(), &[0.25; 4]);
    }

    #[test]
    fn trace_sees_every_node() {
        let g = tiny();
        let e = Engine::new(&g, ExecMode::F32).unwrap();
        let x = batch(1, 16, 16, 3, 2);
        let mut seen = Vec::new();
        let out = e
            .trace(x.as_f32().unwrap(), &mut |id, v| seen.push((id.to_string(), v.len())))
            .unwrap();
        assert_eq!(seen.len(), g.nodes.len());
        assert_eq!(seen[0], ("input".to_string(), 768));
        assert_eq!(seen.last().unwrap().1, 4);
        let batch_out = e.run(&x).unwrap();
        assert_eq!(batch_out.as_f32().unwrap(), &out[..]);
    }
}
