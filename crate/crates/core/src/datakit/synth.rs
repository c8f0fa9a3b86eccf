use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LabeledDataset, Sample};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

pub const TEMPLATE_NAMES: [&str; 8] = ["disk", "hbar", "checker", "gradient", "vbar", "ring", "cross", "corner"];

const COLORS: [[f32; 3]; 8] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.2, 0.3, 0.9],
    [0.9, 0.85, 0.2],
    [0.85, 0.25, 0.85],
    [0.2, 0.85, 0.85],
    [0.95, 0.55, 0.1],
    [0.5, 0.25, 0.7],
];

const BACKGROUND: f32 = 0.1;

/// Coverage of template `class` at normalized coordinates `(u, v)`.
fn mask(class: usize, u: f32, v: f32) -> f32 {
    let (du, dv) = (u - 0.5, v - 0.5);
    let r = (du * du + dv * dv).sqrt();
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    match class {
        0 => on(r < 0.3),
        1 => on(dv.abs() < 0.15),
        2 => on(((u * 4.0).floor() as i32 + (v * 4.0).floor() as i32) % 2 == 0),
        3 => u,
        4 => on(du.abs() < 0.15),
        5 => on(r > 0.2 && r < 0.35),
        6 => on(du.abs() < 0.1 || dv.abs() < 0.1),
        7 => on(u < 0.5 && v < 0.5),
        _ => unreachable!("class count checked"),
    }
}

/// The noise-free image of a class, `[h, w, 3]`.
pub fn template(class: usize, h: usize, w: usize) -> Vec<f32> {
    let mut img = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let m = mask(class, (x as f32 + 0.5) / w as f32, (y as f32 + 0.5) / h as f32);
            img.extend(COLORS[class].iter().map(|&c| BACKGROUND + m * (c - BACKGROUND)));
        }
    }
    img
}

/// `n_per_class` noisy copies of each of the first `num_classes` templates,
/// class-major, with uniform noise in `[-noise, noise]` clipped to `[0, 1]`.
pub fn synth_generate(
    num_classes: usize,
    n_per_class: usize,
    size: (usize, usize),
    noise: f32,
    seed: u64,
) -> Result<LabeledDataset> {
    ensure!(
        (1..=TEMPLATE_NAMES.len()).contains(&num_classes),
        "synthetic data supports 1 to 8 classes, got {num_classes}"
    );
    ensure!((0.0..0.5).contains(&noise), "noise must be in [0, 0.5), got {noise}");
    let (h, w) = size;
    ensure!(h > 0 && w > 0, "image size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-noise, noise);
    let mut samples = Vec::with_capacity(num_classes * n_per_class);
    for class in 0..num_classes {
        let base = template(class, h, w);
        for _ in 0..n_per_class {
            let img = if noise == 0.0 {
                base.clone()
            } else {
                base.iter().map(|&v| (v + dist.sample(&mut rng)).clamp(0.0, 1.0)).collect()
            };
            samples.push(Sample {
                image: Tensor::from_f32(vec![h, w, 3], img)?,
                label: class,
            });
        }
    }
    let names = TEMPLATE_NAMES[..num_classes].iter().map(|s| s.to_string()).collect();
    LabeledDataset::new(samples, names)
}
