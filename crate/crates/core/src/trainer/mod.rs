//! Desk-scale training: backprop over the graph's layers, SGD with momentum
//! and step decay, and head replacement for fine-tuning.

mod network;

pub use crate::linalg::Scalar;
pub use network::{cross_entropy, BatchStats, Gradients, Network};

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::LabeledDataset;
use crate::error::{ensure, Error, Result};
use crate::graph::builders::he_uniform;
use crate::graph::{Graph, NodeKind, QuantTag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f32,
    pub momentum: f32,
    pub lr_step_epochs: usize,
    pub lr_gamma: f32,
    pub seed: u64,
    pub weight_decay: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 32,
            lr0: 0.01,
            momentum: 0.9,
            lr_step_epochs: 7,
            lr_gamma: 0.1,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs > 0, "epochs must be positive");
        ensure!(self.batch_size > 0, "batch size must be positive");
        ensure!(self.lr0 > 0.0 && self.lr0.is_finite(), "lr0 must be positive, got {}", self.lr0);
        ensure!((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1), got {}", self.momentum);
        ensure!(self.lr_step_epochs > 0, "lr step must be positive");
        ensure!(self.lr_gamma > 0.0 && self.lr_gamma.is_finite(), "lr gamma must be positive");
        ensure!(self.weight_decay >= 0.0, "weight decay must be non-negative");
        Ok(())
    }
}

/// `lr0 * gamma^floor(epoch / lr_step_epochs)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f32 {
    let steps = (epoch / cfg.lr_step_epochs) as i32;
    (cfg.lr0 as f64 * (cfg.lr_gamma as f64).powi(steps)) as f32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_acc: f32,
    pub val_acc: f32,
    pub lr: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept (highest validation accuracy).
    pub best_epoch: usize,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    /// One row per epoch.
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\ttrain_acc\tval_acc\tlr\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.4}\t{:.4}\t{:e}",
                e.epoch, e.train_loss, e.train_acc, e.val_acc, e.lr
            );
        }
        let _ = writeln!(s, "# best epoch {}", self.best_epoch);
        if let Some(p) = &self.checkpoint {
            let _ = writeln!(s, "# checkpoint {}", p.display());
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

fn argmax<T: PartialOrd>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn check_data(net: &Network<f32>, ds: &LabeledDataset, what: &str) -> Result<()> {
    ensure!(!ds.is_empty(), "{what} set is empty");
    let [h, w, c] = ds.image_shape().expect("non-empty");
    ensure!(
        h * w * c == net.input_len(),
        "{what} images are {h}x{w}x{c}, the network takes {} values",
        net.input_len()
    );
    ensure!(
        ds.num_classes() <= net.num_classes(),
        "{what} set has {} classes, the network outputs {}",
        ds.num_classes(),
        net.num_classes()
    );
    Ok(())
}

fn gather(ds: &LabeledDataset, idx: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let mut x = Vec::new();
    let mut y = Vec::with_capacity(idx.len());
    for &i in idx {
        x.extend_from_slice(ds.samples[i].image.as_f32().expect("f32 images"));
        y.push(ds.samples[i].label);
    }
    (x, y)
}

/// Accuracy with running batch-norm statistics, evaluated in chunks.
pub fn accuracy(net: &Network<f32>, ds: &LabeledDataset) -> f32 {
    let k = net.num_classes();
    let mut correct = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(128) {
        let (x, y) = gather(ds, chunk);
        let logits = net.predict(&x, chunk.len());
        correct += logits
            .chunks_exact(k)
            .zip(&y)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
    }
    correct as f32 / ds.len().max(1) as f32
}

/// SGD with momentum: `v = mu v + g + wd w; w -= lr v`.
fn sgd_step(params: &mut [Vec<Vec<f32>>], vel: &mut [Vec<Vec<f32>>], grads: &[Vec<Vec<f32>>], lr: f32, cfg: &TrainConfig) {
    for ((p, v), g) in params.iter_mut().zip(vel.iter_mut()).zip(grads) {
        for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            for ((w, m), &d) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *m = cfg.momentum * *m + d + cfg.weight_decay * *w;
                *w -= lr * *m;
            }
        }
    }
}

const BN_MOMENTUM: f32 = 0.1;

fn update_running(net: &mut Network<f32>, stats: &BatchStats<f32>, samples_per_channel: &[usize]) {
    for (i, st) in stats.iter().enumerate() {
        let (Some((mean, var)), Some((rm, rv))) = (st, net.running[i].as_mut()) else {
            continue;
        };
        let m = samples_per_channel[i] as f32;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for ch in 0..mean.len() {
            rm[ch] = (1.0 - BN_MOMENTUM) * rm[ch] + BN_MOMENTUM * mean[ch];
            rv[ch] = (1.0 - BN_MOMENTUM) * rv[ch] + BN_MOMENTUM * var[ch] * unbias;
        }
    }
}

/// Trains every layer of `g` and returns the weights of the epoch with the
/// best validation accuracy (earliest on ties). Single-threaded and
/// bit-deterministic for a fixed seed.
pub fn train(
    g: &Graph,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(Graph, TrainReport)> {
    cfg.validate()?;
    let mut net = Network::<f32>::from_graph(g)?;
    check_data(&net, train_set, "training")?;
    check_data(&net, val_set, "validation")?;
    let shapes = g.infer_shapes()?;
    let bn_rows: Vec<usize> = shapes.iter().map(|s| s[1] * s[2]).collect();

    let mut vel: Vec<Vec<Vec<f32>>> = net
        .params
        .iter()
        .map(|ps| ps.iter().map(|p| vec![0.0; p.len()]).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let k = net.num_classes();
    let mut best: Option<(f32, Network<f32>)> = None;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = gather(train_set, chunk);
            let n = chunk.len();
            let (loss, logits, grads, stats) = net.loss_and_grads(&x, n, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            loss_sum += loss as f64 * n as f64;
            correct += logits
                .chunks_exact(k)
                .zip(&y)
                .filter(|(row, &label)| argmax(row) == label)
                .count();
            let rows: Vec<usize> = bn_rows.iter().map(|r| r * n).collect();
            update_running(&mut net, &stats, &rows);
            sgd_step(&mut net.params, &mut vel, &grads.params, lr, cfg);
        }
        let val_acc = accuracy(&net, val_set);
        let record = EpochRecord {
            epoch,
            train_loss: (loss_sum / train_set.len() as f64) as f32,
            train_acc: correct as f32 / train_set.len() as f32,
            val_acc,
            lr,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train acc {:.4} val acc {:.4} lr {lr:e}",
            record.train_loss,
            record.train_acc,
            val_acc
        );
        records.push(record);
        if best.as_ref().is_none_or(|(acc, _)| val_acc > *acc) {
            best = Some((val_acc, net.clone()));
            best_epoch = epoch;
        }
    }
    let (_, best_net) = best.expect("at least one epoch");
    let out = best_net.to_graph(g)?;
    Ok((
        out,
        TrainReport {
            epochs: records,
            best_epoch,
            checkpoint: None,
        },
    ))
}

/// Loss and per-tensor gradients (named `node.slot`) for one f32 batch in
/// training mode.
pub fn backward(g: &Graph, batch: &Tensor, labels: &[usize]) -> Result<(f32, Vec<(String, Tensor)>)> {
    let net = Network::<f32>::from_graph(g)?;
    let x = batch.expect_f32("training batch")?;
    ensure!(batch.shape().len() == 4, "training batch must be [n, h, w, c]");
    let n = batch.shape()[0];
    ensure!(x.len() == n * net.input_len(), "batch does not match the graph input");
    let (loss, _, grads, _) = net.loss_and_grads(x, n, labels)?;
    let mut out = Vec::new();
    for (node, pg) in g.nodes.iter().zip(grads.params) {
        for (slot, gv) in pg.into_iter().enumerate() {
            out.push((node.weight_name(slot), Tensor::from_f32(node.weights[slot].shape().to_vec(), gv)?));
        }
    }
    Ok((loss, out))
}

/// Replaces the final fully-connected layer with a freshly initialized one
/// producing `num_classes` outputs; everything else is kept bit-for-bit.
pub fn replace_head(g: &Graph, num_classes: usize, seed: u64) -> Result<Graph> {
    ensure!(num_classes >= 2, "a classifier needs at least 2 classes, got {num_classes}");
    if g.meta.quant != QuantTag::None {
        return Err(Error::InvalidState(format!(
            "head replacement needs an unquantized graph, found `{}`",
            g.meta.quant
        )));
    }
    let out_id = g.output_id()?;
    let out = g.node(out_id).expect("validated output");
    let head_id = match out.kind {
        NodeKind::Softmax => out.inputs[0].clone(),
        _ => out.id.clone(),
    };
    let mut g2 = g.clone();
    let head = g2
        .nodes
        .iter_mut()
        .find(|n| n.id == head_id)
        .expect("input of a node exists");
    if head.kind != NodeKind::FullyConnected {
        return Err(Error::UnsupportedPattern(format!(
            "the graph does not end in a fully-connected layer (`{head_id}` is {})",
            head.kind.name()
        )));
    }
    let fan_in = head.weights[0].shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    head.weights = vec![
        he_uniform(&mut rng, vec![fan_in, num_classes], fan_in),
        Tensor::from_f32(vec![num_classes], vec![0.0; num_classes])?,
    ];
    if g2.meta.num_classes != num_classes {
        g2.meta.class_names.clear();
    }
    g2.meta.num_classes = num_classes;
    g2.validate()?;
    Ok(g2)
}
