//! Builds every supported architecture and prints parameter counts and
//! container sizes before and after weight compression.

use edgequant::graph::{build_architecture, serialized_len, Family, TinyConfig};
use edgequant::quantizer::{quantize_dynamic, quantize_fp16};

fn main() -> edgequant::Result<()> {
    let families = [
        (Family::Vgg16, 1000),
        (Family::GoogLeNet, 5),
        (Family::ResNet18, 5),
        (Family::MobileNetV2, 5),
        (Family::EfficientNetB0, 5),
        (Family::TinyCnn(TinyConfig::default()), 4),
    ];
    println!("{:<16} {:>7} {:>12} {:>10} {:>10} {:>10}", "family", "classes", "params", "f32 MB", "fp16 MB", "dyn MB");
    for (family, classes) in families {
        let g = build_architecture(family, classes, family.default_input_size(), 0)?;
        let mb = |bytes: usize| bytes as f64 / 1e6;
        println!(
            "{:<16} {:>7} {:>12} {:>10.2} {:>10.2} {:>10.2}",
            family.name(),
            classes,
            g.param_count(),
            mb(serialized_len(&g)),
            mb(serialized_len(&quantize_fp16(&g)?)),
            mb(serialized_len(&quantize_dynamic(&g)?)),
        );
    }
    Ok(())
}
