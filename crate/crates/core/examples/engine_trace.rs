//! Runs one input through a model in every execution mode and prints the
//! per-layer activation ranges seen by the engine.

use edgequant::datakit::synth_generate;
use edgequant::engine::{Engine, ExecMode};
use edgequant::graph::{build_architecture, Family, TinyConfig};
use edgequant::quantizer::{calibrate, quantize_dynamic, quantize_fp16, quantize_full};

fn main() -> edgequant::Result<()> {
    let g = build_architecture(Family::TinyCnn(TinyConfig::default()), 4, (32, 32), 5)?;
    let data = synth_generate(4, 8, (32, 32), 0.1, 5)?;
    let stats = calibrate(&g, data.batches(8), 4)?;
    let sample = data.samples[0].image.as_f32().unwrap().to_vec();

    let variants = [
        (g.clone(), ExecMode::F32),
        (quantize_fp16(&g)?, ExecMode::Fp16),
        (quantize_dynamic(&g)?, ExecMode::DynamicInt8),
        (quantize_full(&g, &stats)?, ExecMode::FullInt8),
    ];
    for (model, mode) in &variants {
        let engine = Engine::new(model, *mode)?;
        println!("{mode}:");
        let probs = engine.trace(&sample, &mut |id, values| {
            let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            println!("  {id:<24} {:>6} values in [{lo:>9.4}, {hi:>9.4}]", values.len());
        })?;
        println!("  probabilities {probs:.4?}");
    }
    Ok(())
}
