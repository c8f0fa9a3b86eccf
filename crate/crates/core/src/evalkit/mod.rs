//! Classification metrics, size accounting, comparison tables and the
//! size-versus-accuracy model selection policy.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datakit::LabeledDataset;
use crate::engine::{Engine, ExecMode};
use crate::error::{ensure, Error, Result};
use crate::graph::{serialize, Graph};

const EVAL_CHUNK: usize = 64;

/// `K x K` counts, rows indexed by true class, columns by predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        ensure!(rows.iter().all(|r| r.len() == k), "confusion matrix must be square");
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        assert!(truth < self.k && pred < self.k, "class index out of range");
        self.counts[truth * self.k + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    /// Elementwise sum; merging per-worker matrices is order-independent.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        ensure!(self.k == other.k, "cannot merge {}-class and {}-class matrices", self.k, other.k);
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        if self.k == 0 {
            return Vec::new();
        }
        self.counts.chunks(self.k).map(<[u64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f32,
    pub recall: f32,
    pub f1: f32,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f32,
    pub macro_precision: f32,
    pub macro_recall: f32,
    pub macro_f1: f32,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and macro-averaged precision, recall and F1.
///
/// A zero denominator yields 0 for that class, and every class, including
/// ones absent from both truth and prediction, enters the macro mean.
pub fn metrics_from_cm(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    ensure!(total > 0, "confusion matrix is empty");
    let k = cm.k;
    let mut per_class = Vec::with_capacity(k);
    let (mut sp, mut sr, mut sf) = (0.0f64, 0.0f64, 0.0f64);
    for c in 0..k {
        let tp = cm.get(c, c);
        let support: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let predicted: u64 = (0..k).map(|t| cm.get(t, c)).sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, support);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        sp += p;
        sr += r;
        sf += f;
        per_class.push(ClassMetrics {
            precision: p as f32,
            recall: r as f32,
            f1: f as f32,
            support,
        });
    }
    let kf = k as f64;
    Ok(Metrics {
        accuracy: ratio(cm.trace(), total) as f32,
        macro_precision: (sp / kf) as f32,
        macro_recall: (sr / kf) as f32,
        macro_f1: (sf / kf) as f32,
        per_class,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub precision: f32,
    pub recall: f32,
    pub f1: f32,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    /// Architecture the model was derived from; rows of a comparison are
    /// grouped by it.
    pub base: String,
    pub mode: String,
    pub size_bytes: u64,
    pub samples: usize,
    #[serde(default)]
    pub splits: BTreeMap<String, usize>,
    pub accuracy: f32,
    pub macro_precision: f32,
    pub macro_recall: f32,
    pub macro_f1: f32,
    pub per_class: Vec<ClassReport>,
    pub confusion: Vec<Vec<u64>>,
    /// Wall-clock milliseconds per sample; informational only.
    pub latency_ms_per_sample: f64,
    #[serde(default)]
    pub sha256: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    /// A report carrying only headline numbers, for externally measured models.
    pub fn summary(model_id: &str, base: &str, mode: &str, size_bytes: u64, m: [f32; 4]) -> Self {
        EvalReport {
            model_id: model_id.to_string(),
            base: base.to_string(),
            mode: mode.to_string(),
            size_bytes,
            samples: 0,
            splits: BTreeMap::new(),
            accuracy: m[0],
            macro_precision: m[1],
            macro_recall: m[2],
            macro_f1: m[3],
            per_class: Vec::new(),
            confusion: Vec::new(),
            latency_ms_per_sample: 0.0,
            sha256: String::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text).map_err(|e| Error::invalid(format!("bad report: {e}")))?;
        for (what, v) in [
            ("accuracy", r.accuracy),
            ("macro_precision", r.macro_precision),
            ("macro_recall", r.macro_recall),
            ("macro_f1", r.macro_f1),
        ] {
            ensure!((0.0..=1.0).contains(&v), "report field {what} = {v} is outside [0, 1]");
        }
        Ok(r)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Runs `g` over `ds` in `mode` and scores the argmax predictions.
pub fn evaluate(g: &Graph, ds: &LabeledDataset, mode: ExecMode) -> Result<EvalReport> {
    ensure!(!ds.is_empty(), "cannot evaluate on an empty dataset");
    let engine = Engine::new(g, mode)?;
    let k = engine.output_len();
    ensure!(
        ds.num_classes() <= k,
        "dataset has {} classes but the model predicts {k}",
        ds.num_classes()
    );
    let mut cm = ConfusionMatrix::new(k);
    let indices: Vec<usize> = (0..ds.len()).collect();
    let start = Instant::now();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let out = engine.run(&ds.batch(chunk)?)?;
        let probs = out.expect_f32("model output")?;
        for (row, &i) in probs.chunks(k).zip(chunk) {
            cm.add(ds.samples[i].label, argmax(row));
        }
    }
    let latency = start.elapsed().as_secs_f64() * 1e3 / ds.len() as f64;
    let m = metrics_from_cm(&cm)?;
    let bytes = serialize(g);
    let name = |c: usize| {
        ds.class_names
            .get(c)
            .or(g.meta.class_names.get(c))
            .cloned()
            .unwrap_or_else(|| format!("class{c}"))
    };
    Ok(EvalReport {
        model_id: format!("{}-{}", g.meta.family, mode.name()),
        base: g.meta.family.clone(),
        mode: mode.name().to_string(),
        size_bytes: bytes.len() as u64,
        samples: ds.len(),
        splits: BTreeMap::new(),
        accuracy: m.accuracy,
        macro_precision: m.macro_precision,
        macro_recall: m.macro_recall,
        macro_f1: m.macro_f1,
        per_class: m
            .per_class
            .iter()
            .enumerate()
            .map(|(c, pc)| ClassReport {
                name: name(c),
                precision: pc.precision,
                recall: pc.recall,
                f1: pc.f1,
                support: pc.support,
            })
            .collect(),
        confusion: cm.rows(),
        latency_ms_per_sample: latency,
        sha256: sha256_hex(&bytes),
        config: serde_json::Value::Null,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub base: String,
    pub model_id: String,
    pub mode: String,
    pub size_bytes: u64,
    pub accuracy: f32,
    pub precision: f32,
    pub recall: f32,
    pub f1: f32,
    /// Size relative to the unquantized report of the same base model.
    pub size_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

const HEADER: [&str; 9] = ["model", "id", "mode", "size_mb", "acc", "pr", "re", "f1", "ratio"];

impl ComparisonTable {
    fn cells(&self) -> Vec<[String; 9]> {
        self.rows
            .iter()
            .map(|r| {
                [
                    r.base.clone(),
                    r.model_id.clone(),
                    r.mode.clone(),
                    format!("{:.4}", r.size_bytes as f64 / 1e6),
                    format!("{:.4}", r.accuracy),
                    format!("{:.4}", r.precision),
                    format!("{:.4}", r.recall),
                    format!("{:.4}", r.f1),
                    r.size_ratio.map_or("-".to_string(), |v| format!("{v:.4}")),
                ]
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = HEADER.join(",");
        out.push('\n');
        for row in self.cells() {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let cells = self.cells();
        let mut widths = HEADER.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i < 3 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&HEADER.map(String::from));
        for row in &cells {
            out.push_str(&line(row));
        }
        out
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Groups reports by base model, in order of first appearance, sorts each
/// group from largest to smallest container and attaches each row's size ratio against that model's f32 report.
pub fn compare(reports: &[EvalReport]) -> ComparisonTable {
    let mut order: Vec<&str> = Vec::new();
    for r in reports {
        if !order.contains(&r.base.as_str()) {
            order.push(&r.base);
        }
    }
    let mut rows = Vec::with_capacity(reports.len());
    for base in order {
        let mut group: Vec<&EvalReport> = reports.iter().filter(|r| r.base == base).collect();
        group.sort_by_key(|r| std::cmp::Reverse(r.size_bytes));
        let reference = group
            .iter()
            .find(|r| r.mode == ExecMode::F32.name())
            .map(|r| r.size_bytes);
        rows.extend(group.iter().map(|r| ComparisonRow {
            base: base.to_string(),
            model_id: r.model_id.clone(),
            mode: r.mode.clone(),
            size_bytes: r.size_bytes,
            accuracy: r.accuracy,
            precision: r.macro_precision,
            recall: r.macro_recall,
            f1: r.macro_f1,
            size_ratio: reference.filter(|&s| s > 0).map(|s| r.size_bytes as f64 / s as f64),
        }));
    }
    ComparisonTable { rows }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionPolicy {
    /// Smallest model whose macro-F1 reaches the floor; ties prefer higher F1.
    SizePriority { f1_floor: f32 },
    /// Highest macro-F1; ties prefer the smaller model.
    AccuracyPriority,
}

impl FromStr for SelectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "accuracy" => Ok(SelectionPolicy::AccuracyPriority),
            Some(("size", floor)) => {
                let f1_floor: f32 = floor
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad F1 floor `{floor}`")))?;
                ensure!((0.0..=1.0).contains(&f1_floor), "F1 floor {f1_floor} is outside [0, 1]");
                Ok(SelectionPolicy::SizePriority { f1_floor })
            }
            _ => Err(Error::invalid(format!(
                "unknown policy `{s}`, expected `size:<floor>` or `accuracy`"
            ))),
        }
    }
}

fn by_accuracy(a: &EvalReport, b: &EvalReport) -> std::cmp::Ordering {
    b.macro_f1
        .total_cmp(&a.macro_f1)
        .then(a.size_bytes.cmp(&b.size_bytes))
}

/// Picks one report under `policy`. Remaining ties keep input order.
pub fn select_model(reports: &[EvalReport], policy: SelectionPolicy) -> Result<&EvalReport> {
    ensure!(!reports.is_empty(), "no reports to select from");
    match policy {
        SelectionPolicy::AccuracyPriority => Ok(reports.iter().min_by(|a, b| by_accuracy(a, b)).expect("non-empty")),
        SelectionPolicy::SizePriority { f1_floor } => reports
            .iter()
            .filter(|r| r.macro_f1 >= f1_floor)
            .min_by(|a, b| a.size_bytes.cmp(&b.size_bytes).then(b.macro_f1.total_cmp(&a.macro_f1)))
            .ok_or_else(|| {
                let best = reports.iter().min_by(|a, b| by_accuracy(a, b)).expect("non-empty");
                Error::NoFeasibleModel {
                    floor: f1_floor,
                    best_id: best.model_id.clone(),
                    best_f1: best.macro_f1,
                }
            }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f32, b: f64) -> bool {
        (a as f64 - b).abs() < 1e-4
    }

    #[test]
    fn two_class_example() {
        let cm = ConfusionMatrix::from_rows(&[vec![2, 1], vec![0, 3]]).unwrap();
        let m = metrics_from_cm(&cm).unwrap();
        assert!(close(m.accuracy, 5.0 / 6.0));
        assert!(close(m.per_class[0].precision, 1.0));
        assert!(close(m.per_class[0].recall, 2.0 / 3.0));
        assert!(close(m.per_class[0].f1, 0.8));
        assert!(close(m.per_class[1].precision, 0.75));
        assert!(close(m.per_class[1].recall, 1.0));
        assert!(close(m.per_class[1].f1, 6.0 / 7.0));
        assert!(close(m.macro_f1, (0.8 + 6.0 / 7.0) / 2.0));
    }

    #[test]
    fn absent_class_counts_as_zero() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 0, 0], vec![0, 2, 0], vec![0, 0, 0]]).unwrap();
        let m = metrics_from_cm(&cm).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.per_class[2].f1, 0.0);
        assert!(close(m.macro_f1, 2.0 / 3.0));
    }

    #[test]
    fn empty_matrix_is_rejected() {
        assert!(metrics_from_cm(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.25, 0.5, 0.5, 0.1]), 1);
        assert_eq!(argmax(&[0.3, 0.3]), 0);
    }

    fn rep(id: &str, base: &str, mode: &str, size: u64, f1: f32) -> EvalReport {
        EvalReport::summary(id, base, mode, size, [f1; 4])
    }

    #[test]
    fn comparison_ratios() {
        let t = compare(&[
            rep("a-f32", "a", "f32", 400, 0.9),
            rep("b-f32", "b", "f32", 100, 0.9),
            rep("a-fp16", "a", "fp16", 200, 0.9),
        ]);
        let ids: Vec<&str> = t.rows.iter().map(|r| r.model_id.as_str()).collect();
        assert_eq!(ids, ["a-f32", "a-fp16", "b-f32"]);
        assert_eq!(t.rows[1].size_ratio, Some(0.5));
        assert_eq!(t.to_csv().lines().count(), 4);
        assert!(t.to_text().starts_with("model"));
    }

    #[test]
    fn selection_tie_breaks() {
        let rs = [
            rep("big", "x", "f32", 300, 0.97),
            rep("small", "x", "dynamic", 100, 0.96),
            rep("small-better", "y", "dynamic", 100, 0.97),
        ];
        let pick = |p| select_model(&rs, p).unwrap().model_id.clone();
        assert_eq!(pick(SelectionPolicy::SizePriority { f1_floor: 0.95 }), "small-better");
        assert_eq!(pick(SelectionPolicy::AccuracyPriority), "small-better");
        match select_model(&rs, SelectionPolicy::SizePriority { f1_floor: 0.99 }) {
            Err(Error::NoFeasibleModel { best_id, .. }) => assert_eq!(best_id, "small-better"),
            other => panic!("expected no feasible model, got {other:?}"),
        }
    }

    #[test]
    fn policy_parsing() {
        assert_eq!(
            "size:0.95".parse::<SelectionPolicy>().unwrap(),
            SelectionPolicy::SizePriority { f1_floor: 0.95 }
        );
        assert_eq!("accuracy".parse::<SelectionPolicy>().unwrap(), SelectionPolicy::AccuracyPriority);
        assert!("size".parse::<SelectionPolicy>().is_err());
        assert!("size:2".parse::<SelectionPolicy>().is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let r = rep("m", "m", "f32", 10, 0.5);
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
    }
}
