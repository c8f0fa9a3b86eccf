//! Brute-force checks of the quantization primitives against f64 and the
//! `half` crate.

use edgequant::engine::fixed_point::{saturating_rounding_multiply, FixedPointMultiplier, Requantizer};
use edgequant::tensor::{
    choose_qparams_asymmetric, choose_qparams_symmetric, dequantize_value, f16_to_f32, f32_to_f16, quantize_value,
};
use edgequant::QuantParams;
use half::f16;
use rand::Rng;

use super::rng;

pub fn qparam_configs() -> Vec<QuantParams> {
    let mut out: Vec<QuantParams> = [1e-4f32, 0.635, 1.0, 127.0, 3.3e3]
        .iter()
        .map(|&m| choose_qparams_symmetric(m).unwrap())
        .collect();
    for (lo, hi) in [(-1.0f32, 1.0), (0.0, 2.55), (-0.3, 7.1), (-50.0, -2.0), (0.5, 900.0), (-1e-3, 4e-3)] {
        out.push(choose_qparams_asymmetric(lo, hi).unwrap());
    }
    out
}

/// 10^4 in-range samples per configuration; returns the worst error in steps.
pub fn round_trip(seed: u64) -> Result<f64, String> {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for qp in qparam_configs() {
        let (s, zp) = (qp.scale(), qp.zero_point());
        let lo = (-128 - zp) as f64 * s as f64;
        let hi = (127 - zp) as f64 * s as f64;
        for _ in 0..10_000 {
            let x = rng.gen_range(lo..=hi) as f32;
            let back = dequantize_value(quantize_value(x, s, zp), s, zp);
            let err = (x as f64 - back as f64).abs() / s as f64;
            if err > 0.5 {
                return Err(format!("scale {s} zp {zp}: {x} -> {back} is {err} steps off"));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Every binary16 pattern widens like `half` and narrows back to itself.
pub fn binary16_exhaustive() -> Result<(), String> {
    for bits in 0..=u16::MAX {
        let reference = f16::from_bits(bits).to_f32();
        let ours = f16_to_f32(bits);
        if reference.is_nan() {
            if !ours.is_nan() || !f16::from_bits(f32_to_f16(ours)).is_nan() {
                return Err(format!("{bits:#06x}: NaN not preserved"));
            }
            continue;
        }
        if ours.to_bits() != reference.to_bits() {
            return Err(format!("{bits:#06x} widens to {ours:e}, expected {reference:e}"));
        }
        if f32_to_f16(ours) != bits {
            return Err(format!("{bits:#06x} narrows back to {:#06x}", f32_to_f16(ours)));
        }
    }
    Ok(())
}

/// 96 log-uniform multipliers in (1e-6, 1) plus four edge values.
pub fn multipliers(seed: u64) -> Vec<f64> {
    let mut rng = rng(seed);
    let mut ms: Vec<f64> = (0..96).map(|_| 10f64.powf(rng.gen_range(-6.0..0.0))).collect();
    ms.extend([0.25, 0.5, 0.999_999_9, 1e-9]);
    ms
}

/// Every accumulator in [-2^15, 2^15] for each multiplier, within one of
/// the rounded f64 product.
pub fn fixed_point(seed: u64) -> Result<usize, String> {
    let ms = multipliers(seed);
    for &m in &ms {
        let fp = FixedPointMultiplier::from_real(m).map_err(|e| e.to_string())?;
        let rq = Requantizer::from_real(m).map_err(|e| e.to_string())?;
        for acc in -(1i32 << 15)..=(1 << 15) {
            let want = (acc as f64 * m).round();
            let got = saturating_rounding_multiply(acc, fp);
            if (got as f64 - want).abs() > 1.0 || (rq.apply(acc) as f64 - want).abs() > 1.0 {
                return Err(format!("multiplier {m}: acc {acc} -> {got}, oracle {want}"));
            }
        }
    }
    Ok(ms.len())
}
