//! Trains the small CNN on synthetic shapes and reports per-epoch progress.
//!
//! `cargo run --release --example train_tiny -- [epochs]`

use edgequant::datakit::{split, synth_generate, SplitSpec};
use edgequant::engine::ExecMode;
use edgequant::evalkit::evaluate;
use edgequant::graph::{build_architecture, Family, TinyConfig};
use edgequant::trainer::{train, TrainConfig};

fn main() -> edgequant::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(6);
    let data = synth_generate(4, 500, (32, 32), 0.1, 7)?;
    let (tr, va, te) = split(&data, &SplitSpec { seed: 7, ..SplitSpec::default() })?;
    println!("train {} / val {} / test {}", tr.len(), va.len(), te.len());

    let g = build_architecture(Family::TinyCnn(TinyConfig::default()), 4, (32, 32), 7)?;
    let cfg = TrainConfig { epochs, seed: 7, ..TrainConfig::default() };
    let (trained, report) = train(&g, &tr, &va, &cfg)?;
    for e in &report.epochs {
        println!(
            "epoch {:>2}  lr {:.4}  loss {:.4}  train acc {:.3}  val acc {:.3}",
            e.epoch, e.lr, e.train_loss, e.train_acc, e.val_acc
        );
    }
    println!("kept epoch {}", report.best_epoch);
    let r = evaluate(&trained, &te, ExecMode::F32)?;
    println!("test: acc {:.3}  macro F1 {:.3}", r.accuracy, r.macro_f1);
    Ok(())
}
