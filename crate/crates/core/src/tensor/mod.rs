//! Dense tensors and the scalar quantization primitives.
//!
//! A [`Tensor`] is a row-major buffer tagged with a [`DType`]. Int8 tensors
//! always carry [`QuantParams`] describing the affine map
//! `real = (q - zero_point) * scale`; no other dtype may carry them.

mod f16;
mod qparams;

pub use f16::{f16_to_f32, f32_to_f16};
pub use qparams::{
    choose_qparams_asymmetric, choose_qparams_symmetric, dequantize, dequantize_value,
    quantize_affine, quantize_value, Granularity, QuantParams, QMAX, QMIN,
};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    I8,
    I32,
    U8,
}

impl DType {
    pub const fn byte_width(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F16 => 2,
            DType::I8 | DType::U8 => 1,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::I8 => "i8",
            DType::I32 => "i32",
            DType::U8 => "u8",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "f32" => DType::F32,
            "f16" => DType::F16,
            "i8" => DType::I8,
            "i32" => DType::I32,
            "u8" => DType::U8,
            _ => return None,
        })
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Element storage. Half floats are kept as raw binary16 bit patterns.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<u16>),
    I8(Vec<i8>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F16(_) => DType::F16,
            TensorData::I8(_) => DType::I8,
            TensorData::I32(_) => DType::I32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
    qparams: Option<QuantParams>,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    ensure!(!shape.is_empty(), "tensor shape must have at least one dimension");
    ensure!(
        shape.iter().all(|&d| d > 0),
        "tensor dimensions must be positive, got {shape:?}"
    );
    let numel: usize = shape.iter().product();
    ensure!(
        numel == len,
        "shape {shape:?} needs {numel} elements, buffer has {len}"
    );
    Ok(())
}

impl Tensor {
    /// Builds a tensor, enforcing the buffer-length and qparams invariants.
    pub fn new(shape: Vec<usize>, data: TensorData, qparams: Option<QuantParams>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        match (&data, &qparams) {
            (TensorData::I8(_), None) => {
                return Err(Error::invalid("int8 tensors require quantization parameters"))
            }
            (TensorData::I8(_), Some(qp)) => qp.check_against(&shape)?,
            (_, Some(_)) => {
                return Err(Error::invalid(format!(
                    "{} tensors cannot carry quantization parameters",
                    data.dtype()
                )))
            }
            (_, None) => {}
        }
        Ok(Tensor {
            shape,
            data,
            qparams,
        })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data), None)
    }

    pub fn from_f16_bits(shape: Vec<usize>, data: Vec<u16>) -> Result<Self> {
        Self::new(shape, TensorData::F16(data), None)
    }

    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>, qparams: QuantParams) -> Result<Self> {
        Self::new(shape, TensorData::I8(data), Some(qparams))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, TensorData::I32(data), None)
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data), None)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_f32(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn qparams(&self) -> Option<&QuantParams> {
        self.qparams.as_ref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn byte_len(&self) -> usize {
        self.numel() * self.dtype().byte_width()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32_mut(&mut self) -> Option<&mut [f32]> {
        match &mut self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f16_bits(&self) -> Option<&[u16]> {
        match &self.data {
            TensorData::F16(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i8(&self) -> Option<&[i8]> {
        match &self.data {
            TensorData::I8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            _ => None,
        }
    }

    /// Borrows the f32 buffer or fails naming `what`.
    pub fn expect_f32(&self, what: &str) -> Result<&[f32]> {
        self.as_f32()
            .ok_or_else(|| Error::invalid(format!("{what}: expected f32 tensor, got {}", self.dtype())))
    }

    /// Widens any float tensor to f32; integer tensors are dequantized when
    /// they carry qparams and rejected otherwise.
    pub fn to_f32(&self) -> Result<Tensor> {
        match &self.data {
            TensorData::F32(_) => Ok(self.clone()),
            TensorData::F16(v) => {
                Tensor::from_f32(self.shape.clone(), v.iter().map(|&b| f16_to_f32(b)).collect())
            }
            TensorData::I8(_) => dequantize(self),
            _ => Err(Error::invalid(format!(
                "cannot convert {} tensor to f32",
                self.dtype()
            ))),
        }
    }

    /// Narrows an f32 tensor to binary16 storage.
    pub fn to_f16(&self) -> Result<Tensor> {
        let v = self.expect_f32("to_f16")?;
        Tensor::from_f16_bits(self.shape.clone(), v.iter().map(|&x| f32_to_f16(x)).collect())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.numel())?;
        if let Some(qp) = &self.qparams {
            qp.check_against(&shape)?;
        }
        self.shape = shape;
        Ok(self)
    }

    /// Little-endian bytes of the element buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Inverse of [`Tensor::to_le_bytes`].
    pub fn from_le_bytes(
        dtype: DType,
        shape: Vec<usize>,
        bytes: &[u8],
        qparams: Option<QuantParams>,
    ) -> Result<Self> {
        let width = dtype.byte_width();
        ensure!(
            bytes.len().is_multiple_of(width),
            "{} byte buffer is not a multiple of {dtype} width",
            bytes.len()
        );
        let data = match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F16 => TensorData::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
            DType::I32 => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(bytes.to_vec()),
        };
        Tensor::new(shape, data, qparams)
    }

    /// Equality that compares float payloads by bit pattern, so NaNs and
    /// signed zeros must match exactly.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.qparams_bitwise_eq(other)
            && self.to_le_bytes() == other.to_le_bytes()
            && self.dtype() == other.dtype()
    }

    fn qparams_bitwise_eq(&self, other: &Tensor) -> bool {
        match (&self.qparams, &other.qparams) {
            (None, None) => true,
            (Some(a), Some(b)) => a.bitwise_eq(b),
            _ => false,
        }
    }
}
