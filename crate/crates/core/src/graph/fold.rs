use super::{Graph, NodeKind, QuantTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Absorbs every inference-mode batch norm into the conv / depthwise /
/// fully-connected layer that feeds it and removes the BN nodes.
///
/// `w' = w * g / sqrt(var + eps)` along the output-channel axis and
/// `b' = (b - mean) * g / sqrt(var + eps) + beta`.
pub fn fold_batchnorm(g: &Graph) -> Result<Graph> {
    if g.meta.quant != QuantTag::None {
        return Err(Error::InvalidState(format!(
            "batch-norm folding needs an unquantized graph, found `{}`",
            g.meta.quant
        )));
    }
    let mut out = g.clone();
    let bn_ids: Vec<String> = g
        .nodes
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::BatchNorm { .. }))
        .map(|n| n.id.clone())
        .collect();
    for bn_id in bn_ids {
        fold_one(&mut out, &bn_id)?;
    }
    out.validate()?;
    Ok(out)
}

fn fold_one(g: &mut Graph, bn_id: &str) -> Result<()> {
    let bn_idx = g.nodes.iter().position(|n| n.id == bn_id).expect("id collected above");
    let bn = g.nodes[bn_idx].clone();
    let NodeKind::BatchNorm { eps } = bn.kind else {
        unreachable!()
    };
    let producer_id = bn.inputs[0].clone();
    let unsupported = |why: &str| {
        Error::UnsupportedPattern(format!("batch norm `{bn_id}` cannot be folded: {why}"))
    };
    let p_idx = g
        .nodes
        .iter()
        .position(|n| n.id == producer_id)
        .ok_or_else(|| unsupported("producer missing"))?;
    if !g.nodes[p_idx].kind.is_matmul() {
        return Err(unsupported(&format!(
            "it follows `{producer_id}` ({}), not a conv or fully-connected layer",
            g.nodes[p_idx].kind.name()
        )));
    }
    if g.consumers(&producer_id).len() != 1 || g.outputs.contains(&producer_id) {
        return Err(unsupported(&format!("`{producer_id}` has other consumers")));
    }

    let vec_of = |slot: usize| -> Result<Vec<f64>> {
        Ok(bn.weights[slot]
            .expect_f32(bn_id)?
            .iter()
            .map(|&v| v as f64)
            .collect())
    };
    let (gamma, beta, mean, var) = (vec_of(0)?, vec_of(1)?, vec_of(2)?, vec_of(3)?);
    let factor: Vec<f64> = gamma
        .iter()
        .zip(&var)
        .map(|(g, v)| g / (v + eps as f64).sqrt())
        .collect();
    let channels = factor.len();

    let producer = &mut g.nodes[p_idx];
    let w = &producer.weights[0];
    let (shape, wdata) = (w.shape().to_vec(), w.expect_f32(&producer.id)?);
    let folded: Vec<f32> = wdata
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 * factor[i % channels]) as f32)
        .collect();
    let old_bias: Vec<f64> = if producer.kind.has_bias() {
        producer.weights[1]
            .expect_f32(&producer.id)?
            .iter()
            .map(|&v| v as f64)
            .collect()
    } else {
        vec![0.0; channels]
    };
    let bias: Vec<f32> = (0..channels)
        .map(|c| ((old_bias[c] - mean[c]) * factor[c] + beta[c]) as f32)
        .collect();

    producer.weights = vec![Tensor::from_f32(shape, folded)?, Tensor::from_f32(vec![channels], bias)?];
    match &mut producer.kind {
        NodeKind::Conv2D { has_bias, .. } | NodeKind::DepthwiseConv2D { has_bias, .. } => *has_bias = true,
        _ => {}
    }

    g.nodes.remove(bn_idx);
    for node in &mut g.nodes {
        for input in &mut node.inputs {
            if input == bn_id {
                *input = producer_id.clone();
            }
        }
    }
    for out in &mut g.outputs {
        if out == bn_id {
            *out = producer_id.clone();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::builders::{build_architecture, Family, TinyConfig};
    use crate::graph::{GraphMeta, InputSpec, Node, INPUT_ID};
    use crate::tensor::DType;

    #[test]
    fn no_bn_is_unchanged() {
        let cfg = TinyConfig {
            batch_norm: false,
            ..TinyConfig::default()
        };
        let g = build_architecture(Family::TinyCnn(cfg), 3, (8, 8), 1).unwrap();
        let f = fold_batchnorm(&g).unwrap();
        assert_eq!(f.nodes.len(), g.nodes.len());
        for (a, b) in g.nodes.iter().zip(&f.nodes) {
            assert_eq!(a.kind, b.kind);
            for (s, t) in a.weights.iter().zip(&b.weights) {
                assert!(s.bitwise_eq(t));
            }
        }
    }

    #[test]
    fn identity_bn_keeps_weights() {
        let g = build_architecture(Family::TinyCnn(TinyConfig::default()), 3, (8, 8), 1).unwrap();
        let mut g = g;
        // gamma 1, beta 0, mean 0, var 1 - eps makes the BN an exact identity
        for node in &mut g.nodes {
            if let NodeKind::BatchNorm { eps } = node.kind {
                let c = node.weights[3].numel();
                node.weights[3] = Tensor::from_f32(vec![c], vec![1.0 - eps; c]).unwrap();
            }
        }
        let before = g.param_count();
        let f = fold_batchnorm(&g).unwrap();
        assert!(f.nodes.iter().all(|n| !matches!(n.kind, NodeKind::BatchNorm { .. })));
        let conv_before = g.node("stage1.conv").unwrap().weights[0].as_f32().unwrap();
        let conv_after = f.node("stage1.conv").unwrap().weights[0].as_f32().unwrap();
        for (a, b) in conv_before.iter().zip(conv_after) {
            assert!((a - b).abs() <= 1e-7 * a.abs().max(1.0));
        }
        // BN gamma/beta disappear, conv biases appear: 2c - c per BN
        let bn_channels: u64 = [8, 16, 32].iter().sum();
        assert_eq!(f.param_count(), before - bn_channels);
        assert_eq!(f.node("stage2.relu").unwrap().inputs, vec!["stage2.conv".to_string()]);
    }

    #[test]
    fn bn_after_pool_is_rejected() {
        let mut g = Graph::new(
            InputSpec {
                shape: [1, 4, 4, 2],
                dtype: DType::F32,
            },
            GraphMeta {
                family: "t".into(),
                num_classes: 2,
                quant: QuantTag::None,
                class_names: vec![],
            },
        );
        let ones = || Tensor::from_f32(vec![2], vec![1.0; 2]).unwrap();
        g.nodes.push(Node::new("bn", NodeKind::BatchNorm { eps: 1e-5 }, &[INPUT_ID], vec![ones(), ones(), ones(), ones()]));
        g.outputs = vec!["bn".into()];
        assert!(matches!(fold_batchnorm(&g), Err(Error::UnsupportedPattern(_))));
    }
}
