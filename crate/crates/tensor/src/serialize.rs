//! Binary tensor format: an 8-byte little-endian header length, a JSON
//! header `{"dtype": .., "shape": [..]}`, then the raw little-endian buffer.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::{DType, Element, Result, Tensor, TensorError};

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

pub fn write_tensor<T: Element, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let header = serde_json::to_vec(&TensorHeader {
        dtype: T::DTYPE,
        shape: t.shape().to_vec(),
    })
    .map_err(|e| TensorError::Header(e.to_string()))?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.size_of());
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_header<R: Read>(r: &mut R) -> Result<TensorHeader> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 20 {
        return Err(TensorError::Header(format!("header length {len} is implausible")));
    }
    let mut raw = vec![0u8; len as usize];
    r.read_exact(&mut raw)?;
    serde_json::from_slice(&raw).map_err(|e| TensorError::Header(e.to_string()))
}

/// Reads one tensor; the stored dtype must match `T`. Stored values are
/// validated for finiteness.
pub fn read_tensor<T: Element, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let header = read_header(r)?;
    if header.dtype != T::DTYPE {
        return Err(TensorError::DTypeMismatch {
            stored: header.dtype,
            requested: T::DTYPE,
        });
    }
    let n: usize = header.shape.iter().product();
    let size = T::DTYPE.size_of();
    let mut raw = vec![0u8; n * size];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(&header.shape, data)
}

pub fn to_bytes<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}
