//! Loads a class-per-directory image folder, normalizes it and splits it.
//!
//! `cargo run --example image_folder -- <dir>`; without an argument a small
//! folder of generated PPM files is used.

use std::path::PathBuf;

use edgequant::datakit::pnm::{encode, RawImage};
use edgequant::datakit::{load_image_dir, split, SplitSpec};

fn demo_folder() -> std::io::Result<PathBuf> {
    let root = std::env::temp_dir().join(format!("edgequant-images-{}", std::process::id()));
    for (class, rgb) in [("healthy", [0.2, 0.8, 0.2]), ("rust", [0.7, 0.3, 0.1]), ("scab", [0.4, 0.4, 0.3])] {
        let dir = root.join(class);
        std::fs::create_dir_all(&dir)?;
        for i in 0..10 {
            let (w, h) = (24 + i, 20);
            let data = (0..w * h).flat_map(|p| rgb.map(|c: f32| (c + (p % 7) as f32 * 0.01).min(1.0))).collect();
            std::fs::write(dir.join(format!("{i:02}.ppm")), encode(&RawImage { height: h, width: w, channels: 3, data }))?;
        }
    }
    Ok(root)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = match std::env::args().nth(1) {
        Some(dir) => PathBuf::from(dir),
        None => demo_folder()?,
    };
    let mut ds = load_image_dir(&root, (32, 32))?;
    println!("{} images in {} classes from {}", ds.len(), ds.num_classes(), root.display());
    for (name, count) in ds.class_names.iter().zip(ds.class_counts()) {
        println!("  {name}: {count}");
    }
    ds.normalize(&[0.5, 0.5, 0.5], &[0.25, 0.25, 0.25])?;
    let (tr, va, te) = split(&ds, &SplitSpec::default())?;
    println!("split: train {:?} val {:?} test {:?}", tr.class_counts(), va.class_counts(), te.class_counts());
    Ok(())
}
