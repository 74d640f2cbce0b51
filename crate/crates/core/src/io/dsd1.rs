//! `DSD1` binary tensor files.
//!
//! Layout: the magic bytes `DSD1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dimensions, then the row-major payload as
//! little-endian `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSD1";

pub fn encode<T: Real>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * tensor.rank() + 4 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses a `DSD1` buffer; `origin` only labels errors.
pub fn decode<T: Real>(bytes: &[u8], origin: &Path) -> Result<Tensor<T>> {
    let fail = |reason: String| Error::format(origin, reason);
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fail("missing DSD1 magic".into()));
    }
    let rank = read_u32(bytes, 4).ok_or_else(|| fail("truncated header (rank)".into()))? as usize;
    if rank > 16 {
        return Err(fail(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = read_u32(bytes, 8 + 4 * i).ok_or_else(|| fail(format!("truncated header (dim {i})")))?;
        if d == 0 {
            return Err(fail(format!("dimension {i} is zero")));
        }
        shape.push(d as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail("element count overflows".into()))?;
    let start = 8 + 4 * rank;
    let payload = &bytes[start..];
    if payload.len() != count * 4 {
        return Err(fail(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            count * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    Ok(Tensor::from_parts(shape, data))
}

pub fn write<T: Real>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
