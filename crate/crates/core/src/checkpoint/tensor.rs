use std::fmt;
use std::str::FromStr;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F16,
    BF16,
    F32,
    F64,
}

impl DType {
    /// Element width in bytes.
    pub const fn size(self) -> usize {
        match self {
            DType::F16 | DType::BF16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            DType::F16 => "F16",
            DType::BF16 => "BF16",
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F16" => Ok(DType::F16),
            "BF16" => Ok(DType::BF16),
            "F32" => Ok(DType::F32),
            "F64" => Ok(DType::F64),
            other => Err(Error::format("checkpoint header", format!("unknown dtype `{other}`"))),
        }
    }
}

/// Precision in which input weights are read before any arithmetic.
///
/// Under `F32`, F64 inputs are rounded to the nearest F32 first; narrower
/// inputs widen exactly. Differences and accumulations are always carried in
/// F64.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComputeDType {
    #[default]
    F32,
    F64,
}

impl FromStr for ComputeDType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(ComputeDType::F32),
            "f64" => Ok(ComputeDType::F64),
            other => Err(Error::config(format!("unknown compute dtype `{other}`"))),
        }
    }
}

/// Dense row-major tensor with little-endian element bytes.
#[derive(Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &self.dtype)
            .field("shape", &self.shape)
            .field("bytes", &self.data.len())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected = numel(&shape)
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::format("tensor", "element count overflows"))?;
        if expected != data.len() {
            return Err(Error::format(
                "tensor",
                format!(
                    "shape {shape:?} of {dtype} needs {expected} bytes, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor { dtype, shape, data })
    }

    /// Encodes `values` into `dtype` with round-to-nearest-even.
    pub fn from_f64(dtype: DType, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::format(
                "tensor",
                format!("shape {shape:?} does not hold {} values", values.len()),
            ));
        }
        Ok(Tensor {
            dtype,
            shape,
            data: encode(dtype, values),
        })
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Tensor::new(DType::F32, shape, data)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// Exact widening of every element to f64.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        decode(self.dtype, &self.data)
    }

    /// Elements as read under `compute`.
    pub fn values(&self, compute: ComputeDType) -> Vec<f64> {
        let mut out = self.to_f64_vec();
        if compute == ComputeDType::F32 && self.dtype == DType::F64 {
            for v in &mut out {
                *v = *v as f32 as f64;
            }
        }
        out
    }

    /// Round-to-nearest-even conversion; identity when `to` equals the current dtype.
    pub fn cast(&self, to: DType) -> Tensor {
        if to == self.dtype {
            return self.clone();
        }
        Tensor {
            dtype: to,
            shape: self.shape.clone(),
            data: encode(to, &self.to_f64_vec()),
        }
    }
}

fn decode(dtype: DType, bytes: &[u8]) -> Vec<f64> {
    match dtype {
        DType::F16 => bytes
            .chunks_exact(2)
            .map(|b| f16::from_bits(u16::from_le_bytes([b[0], b[1]])).to_f64())
            .collect(),
        DType::BF16 => bytes
            .chunks_exact(2)
            .map(|b| bf16::from_bits(u16::from_le_bytes([b[0], b[1]])).to_f64())
            .collect(),
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect(),
    }
}

pub(crate) fn encode(dtype: DType, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.size());
    match dtype {
        DType::F16 => {
            for &v in values {
                out.extend_from_slice(&f64_to_f16_bits(v).to_le_bytes());
            }
        }
        DType::BF16 => {
            for &v in values {
                out.extend_from_slice(&f64_to_bf16_bits(v).to_le_bytes());
            }
        }
        DType::F32 => {
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Rounds an f64 to a binary format with `man_bits` stored mantissa bits and
/// `exp_bits` exponent bits, returning the encoded bit pattern.
///
/// Single rounding step (RNE) straight from f64; going through f32 first would
/// double-round.
fn round_f64_to_small_float(x: f64, man_bits: u32, exp_bits: u32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 63) as u16) << 15;
    let raw_exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let inf = (((1u32 << exp_bits) - 1) << man_bits) as u16;

    if raw_exp == 0x7ff {
        return if frac == 0 {
            sign | inf
        } else {
            sign | inf | (1 << (man_bits - 1))
        };
    }
    if raw_exp == 0 {
        // f64 subnormals are far below the smallest F16/BF16 subnormal.
        return sign;
    }

    let min_exp = 2 - (1i32 << (exp_bits - 1)); // -14 for F16, -126 for BF16
    let exp = raw_exp - 1023;
    let significand = (1u64 << 52) | frac;
    let quantum_exp = exp.max(min_exp) - man_bits as i32;
    let shift = (quantum_exp - (exp - 52)) as u32;
    if shift > 54 {
        return sign;
    }
    let kept = significand >> shift;
    let rem = significand & ((1u64 << shift) - 1);
    let half = 1u64 << (shift - 1);
    let rounded = if rem > half || (rem == half && kept & 1 == 1) {
        kept + 1
    } else {
        kept
    };

    let encoded = if exp < min_exp {
        // Subnormal range; a carry into bit `man_bits` yields the smallest normal.
        rounded
    } else {
        (((exp - min_exp + 1) as u64) << man_bits) + (rounded - (1u64 << man_bits))
    };
    if encoded >= inf as u64 {
        sign | inf
    } else {
        sign | encoded as u16
    }
}

pub(crate) fn f64_to_f16_bits(x: f64) -> u16 {
    round_f64_to_small_float(x, 10, 5)
}

pub(crate) fn f64_to_bf16_bits(x: f64) -> u16 {
    round_f64_to_small_float(x, 7, 8)
}
