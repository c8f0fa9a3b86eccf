//! Post-training quantization passes.
//!
//! All three passes take an unquantized graph and return a new, tagged one.
//! The int8 passes fold batch norms first.

mod calibration;

pub use calibration::{calibrate, CalibrationStats, TensorStats, DEFAULT_MAX_BATCHES};

use std::collections::HashSet;

use crate::engine::fixed_point::Requantizer;
use crate::error::{Error, Result};
use crate::graph::{fold_batchnorm, Graph, Node, NodeKind, QuantTag, INPUT_ID};
use crate::tensor::{choose_qparams_asymmetric, choose_qparams_symmetric, quantize_affine, QuantParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizeConfig {
    /// Dynamic mode leaves weight tensors smaller than this in f32.
    pub min_elements: usize,
    /// Per-output-channel scales for conv and depthwise weights.
    pub per_channel_conv: bool,
    /// Per-output-channel scales for fully-connected weights.
    pub per_channel_fc: bool,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        QuantizeConfig {
            min_elements: 1024,
            per_channel_conv: true,
            per_channel_fc: false,
        }
    }
}

fn require_unquantized(g: &Graph, pass: &str) -> Result<()> {
    if g.meta.quant != QuantTag::None {
        return Err(Error::InvalidState(format!(
            "{pass} quantization needs an unquantized graph, this one is already `{}`",
            g.meta.quant
        )));
    }
    Ok(())
}

/// Converts every weight tensor to binary16.
pub fn quantize_fp16(g: &Graph) -> Result<Graph> {
    require_unquantized(g, "float16")?;
    let mut out = g.clone();
    for node in &mut out.nodes {
        for w in &mut node.weights {
            *w = w.to_f16()?;
        }
    }
    out.meta.quant = QuantTag::Fp16;
    out.validate()?;
    Ok(out)
}

/// Symmetric int8 copy of a matmul weight, per output channel (last axis)
/// or per tensor.
pub fn quantize_weight(w: &Tensor, per_channel: bool) -> Result<Tensor> {
    let data = w.expect_f32("weight")?;
    let cout = *w.shape().last().expect("non-empty shape");
    let qp = if per_channel {
        let mut max_abs = vec![0.0f32; cout];
        for (i, &v) in data.iter().enumerate() {
            let c = i % cout;
            max_abs[c] = max_abs[c].max(v.abs());
        }
        let scales = max_abs
            .iter()
            .map(|&m| choose_qparams_symmetric(m).map(|q| q.scale()))
            .collect::<Result<Vec<_>>>()?;
        QuantParams::per_channel(w.shape().len() - 1, scales, vec![0; cout], true)?
    } else {
        let max_abs = data.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        choose_qparams_symmetric(max_abs)?
    };
    quantize_affine(w, &qp)
}

fn per_channel_for(kind: &NodeKind, cfg: &QuantizeConfig) -> bool {
    match kind {
        NodeKind::FullyConnected => cfg.per_channel_fc,
        _ => cfg.per_channel_conv,
    }
}

pub fn quantize_dynamic(g: &Graph) -> Result<Graph> {
    quantize_dynamic_with(g, &QuantizeConfig::default())
}

/// Int8 weights for conv / depthwise / fully-connected layers at or above
/// the size threshold; everything else stays f32.
pub fn quantize_dynamic_with(g: &Graph, cfg: &QuantizeConfig) -> Result<Graph> {
    require_unquantized(g, "dynamic-range")?;
    let mut out = fold_batchnorm(g)?;
    for node in &mut out.nodes {
        if node.kind.is_matmul() && node.weights[0].numel() >= cfg.min_elements {
            node.weights[0] = quantize_weight(&node.weights[0], per_channel_for(&node.kind, cfg))?;
        }
    }
    out.meta.quant = QuantTag::Dynamic;
    out.validate()?;
    Ok(out)
}

pub fn quantize_full(g: &Graph, stats: &CalibrationStats) -> Result<Graph> {
    quantize_full_with(g, stats, &QuantizeConfig::default())
}

fn unique_id(taken: &HashSet<String>, base: &str) -> String {
    let mut id = base.to_string();
    let mut n = 1;
    while taken.contains(&id) {
        id = format!("{base}_{n}");
        n += 1;
    }
    id
}

/// Nodes whose int8 output reuses the input's grid.
fn passes_qparams(kind: &NodeKind) -> bool {
    matches!(
        kind,
        NodeKind::ReLU | NodeKind::ReLU6 | NodeKind::MaxPool { .. } | NodeKind::AvgPool { .. } | NodeKind::GlobalAvgPool
    )
}

/// Full-integer graph: int8 activations from calibrated ranges, int8
/// weights, i32 biases and per-channel requantizers, with Quantize and
/// Dequantize nodes at the float boundaries.
pub fn quantize_full_with(g: &Graph, stats: &CalibrationStats, cfg: &QuantizeConfig) -> Result<Graph> {
    require_unquantized(g, "full-integer")?;
    let folded = fold_batchnorm(g)?;
    let act_for = |id: &str| -> Result<QuantParams> {
        let s = stats.get(id).ok_or_else(|| Error::CalibrationIncomplete { tensor: id.to_string() })?;
        choose_qparams_asymmetric(s.min, s.max)
    };

    let mut taken: HashSet<String> = folded.nodes.iter().map(|n| n.id.clone()).collect();
    let quant_id = unique_id(&taken, "quantize");
    taken.insert(quant_id.clone());

    // activation qparams of each folded node (None = float domain)
    let mut acts: std::collections::HashMap<String, QuantParams> = Default::default();
    let mut quant = Node::new(quant_id.clone(), NodeKind::Quantize, &[INPUT_ID], vec![]);
    quant.out_qparams = Some(act_for(INPUT_ID)?);
    acts.insert(INPUT_ID.to_string(), quant.out_qparams.clone().expect("set above"));

    let mut nodes = vec![folded.nodes[0].clone(), quant];
    let mut outputs = folded.outputs.clone();
    let rename = |id: &str| if id == INPUT_ID { quant_id.clone() } else { id.to_string() };

    for node in &folded.nodes[1..] {
        let mut n = node.clone();
        n.inputs = node.inputs.iter().map(|i| rename(i)).collect();
        if n.kind == NodeKind::Softmax {
            let deq_id = unique_id(&taken, "dequantize");
            taken.insert(deq_id.clone());
            nodes.push(Node::new(deq_id.clone(), NodeKind::Dequantize, &[&n.inputs[0]], vec![]));
            n.inputs = vec![deq_id];
            nodes.push(n);
            continue;
        }
        let in_act = acts
            .get(&node.inputs[0])
            .cloned()
            .ok_or_else(|| Error::UnsupportedPattern(format!("`{}` follows a float-domain node", node.id)))?;
        let out_act = if passes_qparams(&node.kind) {
            in_act.clone()
        } else {
            // a lone ReLU/ReLU6 consumer lets the producer use the clipped range
            let consumers = folded.consumers(&node.id);
            let fused = match consumers.as_slice() {
                [c] if !folded.outputs.contains(&node.id) => folded
                    .node(c)
                    .filter(|cn| matches!(cn.kind, NodeKind::ReLU | NodeKind::ReLU6))
                    .map(|cn| cn.id.clone()),
                _ => None,
            };
            act_for(fused.as_deref().unwrap_or(&node.id))?
        };
        if node.kind.is_matmul() {
            n.weights = full_int_weights(node, in_act.scale(), out_act.scale(), cfg)?;
            if let NodeKind::Conv2D { has_bias, .. } | NodeKind::DepthwiseConv2D { has_bias, .. } = &mut n.kind {
                *has_bias = true;
            }
        } else if matches!(node.kind, NodeKind::BatchNorm { .. }) {
            return Err(Error::UnsupportedPattern(format!("batch norm `{}` survived folding", node.id)));
        }
        n.out_qparams = Some(out_act.clone());
        acts.insert(node.id.clone(), out_act);
        nodes.push(n);
    }

    // outputs that are not float yet get their own Dequantize
    for out in &mut outputs {
        if acts.contains_key(out.as_str()) {
            let deq_id = unique_id(&taken, "dequantize");
            taken.insert(deq_id.clone());
            nodes.push(Node::new(deq_id.clone(), NodeKind::Dequantize, &[out.as_str()], vec![]));
            *out = deq_id;
        }
    }

    let mut g2 = Graph {
        nodes,
        input: folded.input,
        outputs,
        meta: folded.meta.clone(),
    };
    g2.meta.quant = QuantTag::FullInt;
    g2.validate()?;
    Ok(g2)
}

/// `[w_i8, bias_i32, m0, shift]` for a matmul node.
fn full_int_weights(node: &Node, s_in: f32, s_out: f32, cfg: &QuantizeConfig) -> Result<Vec<Tensor>> {
    let w = quantize_weight(&node.weights[0], per_channel_for(&node.kind, cfg))?;
    let cout = *w.shape().last().expect("non-empty shape");
    let qp = w.qparams().expect("int8 weight");
    let s_w: Vec<f32> = if qp.scales().len() == 1 {
        vec![qp.scale(); cout]
    } else {
        qp.scales().to_vec()
    };
    let bias_f: Vec<f32> = if node.kind.has_bias() {
        node.weights[1].expect_f32(&node.id)?.to_vec()
    } else {
        vec![0.0; cout]
    };
    let mut bias = Vec::with_capacity(cout);
    let mut m0 = Vec::with_capacity(cout);
    let mut shift = Vec::with_capacity(cout);
    for c in 0..cout {
        let acc_scale = s_in as f64 * s_w[c] as f64;
        bias.push((bias_f[c] as f64 / acc_scale).round_ties_even().clamp(i32::MIN as f64, i32::MAX as f64) as i32);
        let (m, s) = Requantizer::from_real(acc_scale / s_out as f64)?.encode();
        m0.push(m);
        shift.push(s);
    }
    Ok(vec![
        w,
        Tensor::from_i32(vec![cout], bias)?,
        Tensor::from_i32(vec![cout], m0)?,
        Tensor::from_i32(vec![cout], shift)?,
    ])
}
