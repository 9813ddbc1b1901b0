//! Element-wise dtype conversion.
//!
//! All conversions round to nearest-even (the `half` crate's `from_f32`
//! semantics); narrowing `F32 -> BF16` keeps the exponent and rounds the
//! mantissa. Casting a tensor to its own dtype returns the bytes unchanged.

use half::{bf16, f16};

use super::{DType, TensorStoreError};

/// Decode raw little-endian bytes into `f32` working precision.
pub fn decode_f32(bytes: &[u8], dtype: DType) -> Result<Vec<f32>, TensorStoreError> {
    let width = dtype.byte_width();
    if bytes.len() % width != 0 {
        return Err(TensorStoreError::LengthMismatch {
            name: String::new(),
            dtype,
            count: bytes.len() / width,
            expected: (bytes.len() / width) * width,
            actual: bytes.len(),
        });
    }
    let values = match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        DType::BF16 => bytes
            .chunks_exact(2)
            .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    };
    Ok(values)
}

/// Encode `f32` values into the little-endian byte layout of `dtype`,
/// rounding to nearest-even when narrowing.
pub fn encode_f32(values: &[f32], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.byte_width());
    match dtype {
        DType::F32 => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F16 => {
            for v in values {
                out.extend_from_slice(&f16::from_f32(*v).to_le_bytes());
            }
        }
        DType::BF16 => {
            for v in values {
                out.extend_from_slice(&bf16::from_f32(*v).to_le_bytes());
            }
        }
    }
    out
}

/// Convert a raw buffer between dtypes.
///
/// The identity cast returns the input bytes unchanged (bit-for-bit,
/// including signed zeros). Errors if the buffer length is not a multiple of
/// the source element width.
pub fn cast_tensor(bytes: &[u8], from: DType, to: DType) -> Result<Vec<u8>, TensorStoreError> {
    if bytes.len() % from.byte_width() != 0 {
        return Err(TensorStoreError::LengthMismatch {
            name: String::new(),
            dtype: from,
            count: bytes.len() / from.byte_width(),
            expected: (bytes.len() / from.byte_width()) * from.byte_width(),
            actual: bytes.len(),
        });
    }
    if from == to {
        return Ok(bytes.to_vec());
    }
    Ok(encode_f32(&decode_f32(bytes, from)?, to))
}
