//! `MERT` binary tensor files.
//!
//! Layout: the bytes `MERT`, a version byte (`0x01`), a dtype byte
//! (`0` = f32, `1` = f64), a rank byte, `rank` little-endian u64 extents,
//! then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use super::{numel, DType, Element, Tensor};
use crate::error::{Error, Result};

pub const MERT_MAGIC: &[u8; 4] = b"MERT";
pub const MERT_VERSION: u8 = 0x01;

/// A tensor read from disk in its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn cast<T: Element>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} does not fit in a byte", t.rank())));
    }
    let mut out = Vec::with_capacity(7 + 8 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MERT_MAGIC);
    out.push(MERT_VERSION);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

fn decode_as<T: Element>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < 7 || &bytes[..4] != MERT_MAGIC {
        return Err(Error::Format("missing MERT magic".into()));
    }
    if bytes[4] != MERT_VERSION {
        return Err(Error::Format(format!("unsupported version {:#04x}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    let header = 7 + 8 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let expected = numel(&shape)
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Format("extent overflow".into()))?;
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {shape:?} needs {expected}",
            payload.len()
        )));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_as(shape, payload)?),
        DType::F64 => AnyTensor::F64(decode_as(shape, payload)?),
    })
}

pub fn write_mert<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn read_mert_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode(&fs::read(path)?)
}

/// Reads a tensor, converting to `T` if stored in the other precision.
pub fn read_mert<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(read_mert_any(path)?.cast())
}
