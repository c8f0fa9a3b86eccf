use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::engine::{Engine, ExecMode};
use crate::error::{ensure, Error, Result};
use crate::graph::{fold_batchnorm, Graph, QuantTag};
use crate::tensor::Tensor;

/// Batches read when the caller does not set a budget.
pub const DEFAULT_MAX_BATCHES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorStats {
    pub min: f32,
    pub max: f32,
    pub samples_seen: u64,
}

impl TensorStats {
    pub fn of(values: &[f32]) -> Self {
        let (min, max) = values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        TensorStats {
            min,
            max,
            samples_seen: 1,
        }
    }

    pub fn merge(&self, other: &TensorStats) -> TensorStats {
        TensorStats {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
            samples_seen: self.samples_seen + other.samples_seen,
        }
    }
}

/// Observed activation ranges keyed by tensor id: `input` for the graph
/// input and the node id for every node output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationStats {
    entries: BTreeMap<String, TensorStats>,
}

const HEADER: &str = "# edgequant calibration stats: id, min, max, samples";

impl CalibrationStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &str) -> Option<&TensorStats> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorStats)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, id: impl Into<String>, stats: TensorStats) -> Result<()> {
        ensure!(
            stats.min <= stats.max && stats.min.is_finite() && stats.max.is_finite(),
            "invalid range [{}, {}]",
            stats.min,
            stats.max
        );
        self.entries.insert(id.into(), stats);
        Ok(())
    }

    /// Folds `values` into the running range of `id`.
    pub fn record(&mut self, id: &str, values: &[f32]) {
        let s = TensorStats::of(values);
        self.entries
            .entry(id.to_string())
            .and_modify(|e| *e = e.merge(&s))
            .or_insert(s);
    }

    /// Elementwise min/max and summed counts; associative and commutative.
    pub fn merge(&self, other: &CalibrationStats) -> CalibrationStats {
        let mut out = self.clone();
        for (k, v) in &other.entries {
            out.entries
                .entry(k.clone())
                .and_modify(|e| *e = e.merge(v))
                .or_insert(*v);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for (id, t) in &self.entries {
            let _ = writeln!(s, "{id}\t{:?}\t{:?}\t{}", t.min, t.max, t.samples_seen);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut out = CalibrationStats::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::invalid(format!("calibration stats line {}: {what}", i + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, min, max, count] = fields[..] else {
                return Err(bad("expected 4 tab-separated fields"));
            };
            let stats = TensorStats {
                min: min.parse().map_err(|_| bad("bad min"))?,
                max: max.parse().map_err(|_| bad("bad max"))?,
                samples_seen: count.parse().map_err(|_| bad("bad sample count"))?,
            };
            ensure!(!out.entries.contains_key(id), "calibration stats line {}: duplicate id `{id}`", i + 1);
            out.insert(id, stats).map_err(|e| bad(&e.to_string()))?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_text(&text)
    }
}

/// Runs f32 inference over at most `max_batches` batches and records the
/// min/max of the input and of every node output. Batch norms are folded
/// first, so ids refer to the folded graph.
pub fn calibrate<I>(g: &Graph, batches: I, max_batches: usize) -> Result<CalibrationStats>
where
    I: IntoIterator<Item = Tensor>,
{
    ensure!(max_batches > 0, "calibration needs a positive batch budget");
    if g.meta.quant != QuantTag::None {
        return Err(Error::InvalidState(format!(
            "calibration runs on an unquantized graph, found `{}`",
            g.meta.quant
        )));
    }
    let folded = fold_batchnorm(g)?;
    let engine = Engine::new(&folded, ExecMode::F32)?;
    let [_, h, w, c] = folded.input.shape;
    let mut stats = CalibrationStats::new();
    let mut seen = 0;
    for batch in batches.into_iter().take(max_batches) {
        ensure!(
            batch.shape().len() == 4 && batch.shape()[1..] == [h, w, c],
            "calibration batch shape {:?} does not match the graph input [n, {h}, {w}, {c}]",
            batch.shape()
        );
        let x = batch.expect_f32("calibration batch")?;
        let part = x
            .par_chunks_exact(h * w * c)
            .map(|sample| {
                let mut s = CalibrationStats::new();
                engine.trace(sample, &mut |id, v| s.record(id, v)).map(|_| s)
            })
            .try_reduce(CalibrationStats::new, |a, b| Ok(a.merge(&b)))?;
        stats = stats.merge(&part);
        seen += 1;
    }
    ensure!(seen > 0, "calibration needs at least one batch");
    Ok(stats)
}
