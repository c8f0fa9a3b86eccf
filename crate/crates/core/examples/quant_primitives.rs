//! Affine int8 quantization, binary16 conversion and fixed-point
//! requantization on a handful of values.

use edgequant::engine::fixed_point::{saturating_rounding_multiply, FixedPointMultiplier, Requantizer};
use edgequant::tensor::{
    choose_qparams_asymmetric, choose_qparams_symmetric, dequantize_value, f16_to_f32, f32_to_f16, quantize_value,
};

fn main() -> edgequant::Result<()> {
    let asym = choose_qparams_asymmetric(-0.8, 2.4)?;
    let sym = choose_qparams_symmetric(2.4)?;
    for (name, qp) in [("asymmetric [-0.8, 2.4]", &asym), ("symmetric |x| <= 2.4", &sym)] {
        let (s, zp) = (qp.scale(), qp.zero_point());
        println!("{name}: scale {s:.6} zero point {zp}");
        for x in [-0.8f32, 0.0, 0.01, 1.0, 2.4, 5.0] {
            let q = quantize_value(x, s, zp);
            println!("  {x:>6} -> {q:>4} -> {:.6}", dequantize_value(q, s, zp));
        }
    }

    println!("binary16:");
    for x in [1.0f32, 0.1, 65504.0, 70000.0, 1e-8] {
        let bits = f32_to_f16(x);
        println!("  {x:e} -> {bits:#06x} -> {:e}", f16_to_f32(bits));
    }

    println!("fixed point:");
    for m in [0.5, 0.25, 0.0123, 0.9999] {
        let fp = FixedPointMultiplier::from_real(m)?;
        println!(
            "  {m}: m0 {} shift {}  1000 * m = {}",
            fp.m0,
            fp.right_shift,
            saturating_rounding_multiply(1000, fp)
        );
    }
    let rq = Requantizer::from_real(3.75)?;
    println!("  requantize 1000 by 3.75 = {}", rq.apply(1000));
    Ok(())
}
