//! Integer-only requantization.
//!
//! A real multiplier `m` in `(0, 1)` is stored as a Q31 mantissa `m0` in
//! `[2^30, 2^31)` and a right shift, so `m ~= m0 * 2^-31 * 2^-right_shift`.
//! Applying it is a saturating rounding doubling high multiply followed by
//! a rounding right shift, the same arithmetic integer-only accelerators use.

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointMultiplier {
    pub m0: i32,
    pub right_shift: u32,
}

const Q31: f64 = 2147483648.0;
// beyond this the shifted product is zero for every i32 input
const MAX_SHIFT: u32 = 62;

impl FixedPointMultiplier {
    /// Encodes a real multiplier in `(0, 1)`.
    pub fn from_real(m: f64) -> Result<Self> {
        ensure!(m.is_finite() && m > 0.0 && m < 1.0, "fixed-point multiplier must be in (0, 1), got {m}");
        let mut q = m;
        let mut shift = 0u32;
        while q < 0.5 {
            q *= 2.0;
            shift += 1;
        }
        let mut m0 = (q * Q31).round() as i64;
        if m0 == 1 << 31 {
            if shift == 0 {
                // m rounds up to exactly 1.0; stay just below it
                m0 = i32::MAX as i64;
            } else {
                m0 = 1 << 30;
                shift -= 1;
            }
        }
        Ok(FixedPointMultiplier {
            m0: m0 as i32,
            right_shift: shift.min(MAX_SHIFT),
        })
    }

    /// The real value this multiplier represents.
    pub fn real(&self) -> f64 {
        self.m0 as f64 / Q31 / 2f64.powi(self.right_shift as i32)
    }
}

/// `round(a * b / 2^31)` with ties away from zero, saturating the single
/// overflow case `a == b == i32::MIN`.
pub fn saturating_rounding_doubling_high_mul(a: i32, b: i32) -> i32 {
    if a == i32::MIN && b == i32::MIN {
        return i32::MAX;
    }
    let ab = a as i64 * b as i64;
    let nudge: i64 = if ab >= 0 { 1 << 30 } else { 1 - (1 << 30) };
    ((ab + nudge) / (1i64 << 31)) as i32
}

/// `x / 2^exponent` rounded to nearest, ties away from zero.
pub fn rounding_divide_by_pot(x: i32, exponent: u32) -> i32 {
    if exponent == 0 {
        return x;
    }
    let exponent = exponent.min(MAX_SHIFT);
    let x = x as i64;
    let mask = (1i64 << exponent) - 1;
    let remainder = x & mask;
    let threshold = (mask >> 1) + (x < 0) as i64;
    ((x >> exponent) + (remainder > threshold) as i64) as i32
}

/// `round(acc * m)` in integer arithmetic.
pub fn saturating_rounding_multiply(acc: i32, m: FixedPointMultiplier) -> i32 {
    rounding_divide_by_pot(saturating_rounding_doubling_high_mul(acc, m.m0), m.right_shift)
}

/// Any positive multiplier: a left shift that brings it below one, then a
/// [`FixedPointMultiplier`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requantizer {
    pub left_shift: u32,
    pub mult: FixedPointMultiplier,
}

impl Requantizer {
    pub fn from_real(m: f64) -> Result<Self> {
        ensure!(m.is_finite() && m > 0.0, "requantization multiplier must be positive, got {m}");
        let mut q = m;
        let mut left_shift = 0;
        while q >= 1.0 {
            q /= 2.0;
            left_shift += 1;
        }
        Ok(Requantizer {
            left_shift,
            mult: FixedPointMultiplier::from_real(q)?,
        })
    }

    /// Single signed shift for storage: positive shifts right, negative left.
    pub fn encode(&self) -> (i32, i32) {
        (self.mult.m0, self.mult.right_shift as i32 - self.left_shift as i32)
    }

    pub fn decode(m0: i32, shift: i32) -> Result<Self> {
        ensure!(m0 >= 1 << 30, "stored multiplier mantissa {m0} below 2^30");
        let (left_shift, right_shift) = if shift < 0 { (shift.unsigned_abs(), 0) } else { (0, shift as u32) };
        ensure!(left_shift <= 31 && right_shift <= MAX_SHIFT, "stored shift {shift} out of range");
        Ok(Requantizer {
            left_shift,
            mult: FixedPointMultiplier { m0, right_shift },
        })
    }

    pub fn real(&self) -> f64 {
        self.mult.real() * 2f64.powi(self.left_shift as i32)
    }

    #[inline]
    pub fn apply(&self, acc: i32) -> i32 {
        if self.left_shift == 0 {
            return saturating_rounding_multiply(acc, self.mult);
        }
        // the shifted accumulator may not fit in i32; do the product wide
        let x = ((acc as i128) << self.left_shift) * self.mult.m0 as i128;
        let shift = 31 + self.mult.right_shift;
        let half = 1i128 << (shift - 1);
        let r = if x >= 0 { (x + half) >> shift } else { -((-x + half) >> shift) };
        r.clamp(i32::MIN as i128, i32::MAX as i128) as i32
    }
}
