//! The full post-training quantization workflow: train, calibrate, quantize
//! three ways, evaluate each variant, tabulate and pick one.

use edgequant::datakit::{split, synth_generate, SplitSpec};
use edgequant::engine::ExecMode;
use edgequant::evalkit::{compare, evaluate, select_model, SelectionPolicy};
use edgequant::graph::{build_architecture, Family, TinyConfig};
use edgequant::quantizer::{calibrate, quantize_dynamic, quantize_fp16, quantize_full};
use edgequant::trainer::{train, TrainConfig};

fn main() -> edgequant::Result<()> {
    let data = synth_generate(4, 300, (32, 32), 0.1, 3)?;
    let (tr, va, te) = split(&data, &SplitSpec { seed: 3, ..SplitSpec::default() })?;
    let g = build_architecture(Family::TinyCnn(TinyConfig::default()), 4, (32, 32), 3)?;
    let (g, _) = train(&g, &tr, &va, &TrainConfig { epochs: 5, seed: 3, ..TrainConfig::default() })?;

    let stats = calibrate(&g, tr.batches(32), 100)?;
    println!("calibrated {} activation tensors", stats.len());

    let variants = [
        (g.clone(), ExecMode::F32),
        (quantize_fp16(&g)?, ExecMode::Fp16),
        (quantize_dynamic(&g)?, ExecMode::DynamicInt8),
        (quantize_full(&g, &stats)?, ExecMode::FullInt8),
    ];
    let mut reports = vec![];
    for (model, mode) in &variants {
        reports.push(evaluate(model, &te, *mode)?);
    }
    print!("{}", compare(&reports));

    for policy in [SelectionPolicy::SizePriority { f1_floor: 0.95 }, SelectionPolicy::AccuracyPriority] {
        let pick = select_model(&reports, policy)?;
        println!("{policy:?}: {}", pick.model_id);
    }
    Ok(())
}
