//! Datasets: folder-per-class images, manifests, stratified splits and a
//! synthetic generator for runs without real data.

pub mod pnm;
mod resize;
mod synth;

pub use resize::resize_bilinear;
pub use synth::{synth_generate, template, TEMPLATE_NAMES};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[h, w, c]` f32.
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        let ds = LabeledDataset { samples, class_names };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        let k = self.class_names.len();
        let shape = self.samples.first().map(|s| s.image.shape().to_vec());
        for (i, s) in self.samples.iter().enumerate() {
            ensure!(s.label < k, "sample {i} has label {} but there are {k} classes", s.label);
            ensure!(
                s.image.shape().len() == 3 && Some(s.image.shape().to_vec()) == shape,
                "sample {i} has shape {:?}, expected {:?}",
                s.image.shape(),
                shape.as_deref().unwrap_or(&[])
            );
            s.image.expect_f32("dataset image")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `[h, w, c]` shared by all samples.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.samples.first().map(|s| {
            let d = s.image.shape();
            [d[0], d[1], d[2]]
        })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Stacks the chosen samples into an `[n, h, w, c]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let [h, w, c] = self.image_shape().ok_or_else(|| Error::invalid("empty dataset"))?;
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::invalid(format!("sample index {i} out of range")))?;
            data.extend_from_slice(s.image.as_f32().expect("checked on construction"));
        }
        Tensor::from_f32(vec![indices.len(), h, w, c], data)
    }

    /// Consecutive batches in dataset order; the last may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Tensor> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let bs = batch_size.max(1);
        (0..self.len().div_ceil(bs)).map(move |b| {
            let end = ((b + 1) * bs).min(idx.len());
            self.batch(&idx[b * bs..end]).expect("indices in range")
        })
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// `(x - mean[c]) / std[c]` per channel, in place.
    pub fn normalize(&mut self, mean: &[f32], std: &[f32]) -> Result<()> {
        let c = self.image_shape().map_or(mean.len(), |s| s[2]);
        ensure!(
            mean.len() == c && std.len() == c,
            "normalization needs {c} means and stds, got {} and {}",
            mean.len(),
            std.len()
        );
        ensure!(std.iter().all(|&s| s > 0.0), "normalization stds must be positive");
        for s in &mut self.samples {
            let px = s.image.as_f32_mut().expect("f32 images");
            for (i, v) in px.iter_mut().enumerate() {
                *v = (*v - mean[i % c]) / std[i % c];
            }
        }
        Ok(())
    }
}

fn image_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn is_image_file(path: &Path) -> bool {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("ppm" | "pgm" | "pnm") => true,
        Some("png") => cfg!(feature = "png"),
        _ => false,
    }
}

/// Reads one image file as RGB `[h, w, 3]` resized to `size`.
pub fn load_image(path: &Path, size: (usize, usize)) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| image_error(path, e.to_string()))?;
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let raw = if is_png {
        decode_png(&bytes).map_err(|m| image_error(path, m))?
    } else {
        pnm::decode(&bytes).map_err(|m| image_error(path, m))?
    };
    let raw = raw.into_rgb();
    let data = resize_bilinear(&raw.data, raw.height, raw.width, 3, size.0, size.1);
    Tensor::from_f32(vec![size.0, size.1, 3], data)
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> std::result::Result<pnm::RawImage, String> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?
        .to_rgb8();
    Ok(pnm::RawImage {
        height: img.height() as usize,
        width: img.width() as usize,
        channels: 3,
        data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    })
}

#[cfg(not(feature = "png"))]
fn decode_png(_: &[u8]) -> std::result::Result<pnm::RawImage, String> {
    Err("PNG support is not compiled in (enable the `png` feature)".into())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

fn load_all(files: Vec<(PathBuf, usize)>, size: (usize, usize)) -> Result<Vec<Sample>> {
    files
        .par_iter()
        .map(|(path, label)| {
            Ok(Sample {
                image: load_image(path, size)?,
                label: *label,
            })
        })
        .collect()
}

/// Loads `root/<class>/<image>`; classes and files in lexicographic order.
/// Files that are not PPM/PGM (or PNG with the feature) are skipped.
pub fn load_image_dir(root: &Path, size: (usize, usize)) -> Result<LabeledDataset> {
    ensure!(size.0 > 0 && size.1 > 0, "target size must be positive");
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::Data {
            path: root.to_path_buf(),
            message: "no class subdirectories".into(),
        });
    }
    let mut class_names = Vec::new();
    let mut files = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        class_names.push(dir.file_name().expect("listed entry").to_string_lossy().into_owned());
        let mut n = 0;
        for path in sorted_entries(dir)? {
            if path.is_file() && is_image_file(&path) {
                files.push((path, label));
                n += 1;
            } else if path.is_file() {
                log::warn!("skipping non-image file {}", path.display());
            }
        }
        if n == 0 {
            log::warn!("class directory {} holds no images", dir.display());
        }
    }
    LabeledDataset::new(load_all(files, size)?, class_names)
}

/// Loads images listed as `relative/path<TAB>class` lines, relative to the
/// manifest's directory. Class indices follow sorted class names; sample
/// order follows the manifest.
pub fn load_manifest(manifest: &Path, size: (usize, usize)) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(manifest)
        .map_err(|e| Error::io(format!("reading manifest {}", manifest.display()), e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (path, class) = line.split_once('\t').ok_or_else(|| Error::Data {
            path: manifest.to_path_buf(),
            message: format!("line {}: expected `path<TAB>class`", i + 1),
        })?;
        entries.push((base.join(path), class.trim().to_string()));
    }
    let mut class_names: Vec<String> = entries.iter().map(|(_, c)| c.clone()).collect();
    class_names.sort();
    class_names.dedup();
    let files = entries
        .into_iter()
        .map(|(p, c)| {
            let label = class_names.binary_search(&c).expect("collected above");
            (p, label)
        })
        .collect();
    LabeledDataset::new(load_all(files, size)?, class_names)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: [0.70, 0.15, 0.15],
            seed: 0,
            stratified: true,
        }
    }
}

/// How many of `n` items each split receives. Positive-ratio splits that
/// round to zero borrow one item from the largest split when `n` allows.
fn split_counts(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let val = ((n as f64 * ratios[1]).round() as usize).min(n - train);
    let mut counts = [train, val, n - train - val];
    if ratios[2] == 0.0 && counts[2] > 0 {
        // rounding leftovers go to the largest positive split
        let k = if ratios[0] >= ratios[1] { 0 } else { 1 };
        counts[k] += counts[2];
        counts[2] = 0;
    }
    let wanted = ratios.iter().filter(|&&r| r > 0.0).count();
    if n >= wanted {
        for s in 0..3 {
            if ratios[s] > 0.0 && counts[s] == 0 {
                let donor = (0..3).max_by_key(|&d| (counts[d], std::cmp::Reverse(d))).expect("three splits");
                counts[donor] -= 1;
                counts[s] += 1;
            }
        }
    }
    counts
}

/// Deterministic (stratified) train / validation / test split. Each split
/// keeps the original sample order.
pub fn split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    ensure!(
        spec.ratios.iter().all(|r| r.is_finite() && *r >= 0.0),
        "split ratios must be non-negative, got {:?}",
        spec.ratios
    );
    let sum: f64 = spec.ratios.iter().sum();
    ensure!((sum - 1.0).abs() <= 1e-9, "split ratios must sum to 1, got {sum}");
    let groups: Vec<Vec<usize>> = if spec.stratified {
        let mut g = vec![Vec::new(); ds.num_classes()];
        for (i, s) in ds.samples.iter().enumerate() {
            g[s.label].push(i);
        }
        g
    } else {
        vec![(0..ds.len()).collect()]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for mut group in groups {
        group.shuffle(&mut rng);
        let [a, b, _] = split_counts(group.len(), &spec.ratios);
        parts[0].extend_from_slice(&group[..a]);
        parts[1].extend_from_slice(&group[a..a + b]);
        parts[2].extend_from_slice(&group[a + b..]);
    }
    let [mut tr, mut va, mut te] = parts;
    tr.sort_unstable();
    va.sort_unstable();
    te.sort_unstable();
    Ok((ds.subset(&tr), ds.subset(&va), ds.subset(&te)))
}
