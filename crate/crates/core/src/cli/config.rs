use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datakit::SplitSpec;
use crate::error::{ensure, Error, Result};
use crate::quantizer::{QuantizeConfig, DEFAULT_MAX_BATCHES};
use crate::trainer::TrainConfig;

/// Settings read from a TOML file. Every field is optional; command-line
/// flags take precedence over the file.
///
/// ```toml
/// seed = 7
/// threads = 4
///
/// [model]
/// family = "tiny_cnn"
/// num_classes = 4
/// input_size = [32, 32]
///
/// [data]
/// dir = "data/guava"            # or: synth = "classes=4,per-class=500"
/// mean = [0.5, 0.5, 0.5]
/// std = [0.25, 0.25, 0.25]
///
/// [split]
/// ratios = [0.7, 0.15, 0.15]
/// stratified = true
///
/// [train]
/// epochs = 15
/// batch_size = 32
/// lr0 = 0.01
/// momentum = 0.9
/// lr_step_epochs = 7
/// lr_gamma = 0.1
/// weight_decay = 0.0
///
/// [quantize]
/// mode = "dynamic"
/// min_elements = 1024
/// per_channel_conv = true
/// per_channel_fc = false
/// calibration_batches = 100
/// calibration_batch_size = 32
///
/// report = "reports/run.json"
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub model: ModelSection,
    pub data: DataSection,
    pub split: SplitSection,
    pub train: TrainConfig,
    pub quantize: QuantizeSection,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub family: Option<String>,
    pub num_classes: Option<usize>,
    pub input_size: Option<[usize; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub synth: Option<String>,
    pub mean: Option<Vec<f32>>,
    pub std: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub ratios: [f64; 3],
    pub stratified: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        let d = SplitSpec::default();
        SplitSection {
            ratios: d.ratios,
            stratified: d.stratified,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizeSection {
    pub mode: Option<String>,
    pub min_elements: usize,
    pub per_channel_conv: bool,
    pub per_channel_fc: bool,
    pub calibration_batches: usize,
    pub calibration_batch_size: usize,
}

impl Default for QuantizeSection {
    fn default() -> Self {
        let d = QuantizeConfig::default();
        QuantizeSection {
            mode: None,
            min_elements: d.min_elements,
            per_channel_conv: d.per_channel_conv,
            per_channel_fc: d.per_channel_fc,
            calibration_batches: DEFAULT_MAX_BATCHES,
            calibration_batch_size: 32,
        }
    }
}

impl QuantizeSection {
    pub fn to_config(&self) -> QuantizeConfig {
        QuantizeConfig {
            min_elements: self.min_elements,
            per_channel_conv: self.per_channel_conv,
            per_channel_fc: self.per_channel_fc,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
        Self::from_toml(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        ensure!(self.threads != Some(0), "threads must be positive");
        ensure!(
            self.split.ratios.iter().all(|r| (0.0..=1.0).contains(r))
                && (self.split.ratios.iter().sum::<f64>() - 1.0).abs() < 1e-6,
            "split ratios must be in [0, 1] and sum to 1, got {:?}",
            self.split.ratios
        );
        ensure!(self.quantize.calibration_batches > 0, "calibration_batches must be positive");
        ensure!(self.quantize.calibration_batch_size > 0, "calibration_batch_size must be positive");
        if let (Some(m), Some(s)) = (&self.data.mean, &self.data.std) {
            ensure!(m.len() == s.len(), "data.mean and data.std must have the same length");
        }
        ensure!(
            self.data.mean.is_some() == self.data.std.is_some(),
            "data.mean and data.std must be given together"
        );
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            ratios: self.split.ratios,
            seed: self.seed(),
            stratified: self.split.stratified,
        }
    }
}
