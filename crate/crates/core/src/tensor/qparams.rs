use super::{Tensor, TensorData};
use crate::error::{ensure, Error, Result};

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

/// Affine int8 mapping: `real = (q - zero_point) * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    granularity: Granularity,
    scales: Vec<f32>,
    zero_points: Vec<i32>,
    symmetric: bool,
}

impl QuantParams {
    pub fn new(
        granularity: Granularity,
        scales: Vec<f32>,
        zero_points: Vec<i32>,
        symmetric: bool,
    ) -> Result<Self> {
        ensure!(
            scales.len() == zero_points.len() && !scales.is_empty(),
            "need one zero point per scale ({} scales, {} zero points)",
            scales.len(),
            zero_points.len()
        );
        if granularity == Granularity::PerTensor {
            ensure!(scales.len() == 1, "per-tensor qparams take exactly one scale");
        }
        for &s in &scales {
            ensure!(s.is_finite() && s > 0.0, "scale must be finite and positive, got {s}");
        }
        for &z in &zero_points {
            ensure!((QMIN..=QMAX).contains(&z), "zero point {z} outside int8 range");
            ensure!(!symmetric || z == 0, "symmetric qparams need zero points of 0");
        }
        Ok(QuantParams {
            granularity,
            scales,
            zero_points,
            symmetric,
        })
    }

    pub fn per_tensor(scale: f32, zero_point: i32) -> Result<Self> {
        Self::new(Granularity::PerTensor, vec![scale], vec![zero_point], zero_point == 0)
    }

    pub fn per_channel(
        axis: usize,
        scales: Vec<f32>,
        zero_points: Vec<i32>,
        symmetric: bool,
    ) -> Result<Self> {
        Self::new(Granularity::PerChannel { axis }, scales, zero_points, symmetric)
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Scale of a per-tensor mapping (the first scale otherwise).
    pub fn scale(&self) -> f32 {
        self.scales[0]
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_points[0]
    }

    /// Checks that these qparams can describe a tensor of `shape`.
    pub fn check_against(&self, shape: &[usize]) -> Result<()> {
        if let Granularity::PerChannel { axis } = self.granularity {
            ensure!(
                axis < shape.len(),
                "per-channel axis {axis} out of range for shape {shape:?}"
            );
            ensure!(
                shape[axis] == self.scales.len(),
                "per-channel axis {axis} has {} entries but {} scales were given",
                shape[axis],
                self.scales.len()
            );
        }
        Ok(())
    }

    /// Maps a flat row-major index to the index of its scale/zero point.
    pub(crate) fn channel_of(&self, shape: &[usize]) -> impl Fn(usize) -> usize {
        let (stride, dim) = match self.granularity {
            Granularity::PerTensor => (1, 1),
            Granularity::PerChannel { axis } => (shape[axis + 1..].iter().product(), shape[axis]),
        };
        move |i| (i / stride) % dim
    }

    pub fn bitwise_eq(&self, other: &QuantParams) -> bool {
        self.granularity == other.granularity
            && self.symmetric == other.symmetric
            && self.zero_points == other.zero_points
            && self.scales.len() == other.scales.len()
            && self
                .scales
                .iter()
                .zip(&other.scales)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Symmetric int8 qparams covering `[-max_abs, max_abs]`.
pub fn choose_qparams_symmetric(max_abs: f32) -> Result<QuantParams> {
    ensure!(
        max_abs.is_finite() && max_abs >= 0.0,
        "max_abs must be finite and non-negative, got {max_abs}"
    );
    let scale = max_abs / QMAX as f32;
    // zero range, or a subnormal range whose scale underflows
    let scale = if scale > 0.0 { scale } else { 1.0 };
    QuantParams::new(Granularity::PerTensor, vec![scale], vec![0], true)
}

/// Asymmetric int8 qparams covering `[min_v, max_v]`, widened to include 0.
pub fn choose_qparams_asymmetric(min_v: f32, max_v: f32) -> Result<QuantParams> {
    ensure!(
        min_v.is_finite() && max_v.is_finite(),
        "range bounds must be finite, got [{min_v}, {max_v}]"
    );
    ensure!(min_v <= max_v, "min {min_v} exceeds max {max_v}");
    let lo = min_v.min(0.0);
    let hi = max_v.max(0.0);
    let span = hi - lo;
    let scale = span / (QMAX - QMIN) as f32;
    if !(scale > 0.0) || !scale.is_finite() {
        return QuantParams::new(Granularity::PerTensor, vec![1.0], vec![0], false);
    }
    // Use the exact span rather than the rounded scale so ranges symmetric
    // about zero land on the tie at -0.5 and round to 0.
    let zp = (QMIN as f64 - lo as f64 * (QMAX - QMIN) as f64 / (hi as f64 - lo as f64))
        .round_ties_even()
        .clamp(QMIN as f64, QMAX as f64) as i32;
    QuantParams::new(Granularity::PerTensor, vec![scale], vec![zp], false)
}

#[inline]
pub fn quantize_value(x: f32, scale: f32, zero_point: i32) -> i8 {
    let q = ((x / scale).round_ties_even() + zero_point as f32).clamp(QMIN as f32, QMAX as f32);
    q as i8
}

#[inline]
pub fn dequantize_value(q: i8, scale: f32, zero_point: i32) -> f32 {
    (q as i32 - zero_point) as f32 * scale
}

/// Quantizes an f32 tensor to int8 under `qp`.
pub fn quantize_affine(x: &Tensor, qp: &QuantParams) -> Result<Tensor> {
    let data = x.expect_f32("quantize_affine")?;
    qp.check_against(x.shape())?;
    let channel = qp.channel_of(x.shape());
    let out = data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = channel(i);
            quantize_value(v, qp.scales[c], qp.zero_points[c])
        })
        .collect();
    Tensor::new(x.shape().to_vec(), TensorData::I8(out), Some(qp.clone()))
}

/// Maps an int8 tensor back to f32 using its attached qparams.
pub fn dequantize(q: &Tensor) -> Result<Tensor> {
    let data = q
        .as_i8()
        .ok_or_else(|| Error::invalid(format!("dequantize expects i8, got {}", q.dtype())))?;
    let qp = q
        .qparams()
        .ok_or_else(|| Error::invalid("dequantize: tensor has no qparams"))?;
    let channel = qp.channel_of(q.shape());
    let out = data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = channel(i);
            dequantize_value(v, qp.scales[c], qp.zero_points[c])
        })
        .collect();
    Tensor::from_f32(q.shape().to_vec(), out)
}
