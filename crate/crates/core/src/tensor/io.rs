//! Binary tensor files.
//!
//! Layout (little-endian): magic `GHVT`, `u8` dtype code (0 = f32, 1 = f64),
//! `u8` rank, `u32` per extent, then the scalars in row-major order.

use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GHVT";

pub fn encode<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + S::DTYPE.width() * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(S::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Decode bytes holding a tensor of element type `S`. `origin` is only used
/// in error messages.
pub fn decode<S: Scalar>(bytes: &[u8], origin: &Path) -> Result<Tensor<S>> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(format_err(origin, "bad magic, expected GHVT"));
    }
    let dtype = DType::from_code(bytes[4])
        .ok_or_else(|| format_err(origin, format!("unknown dtype code {}", bytes[4])))?;
    if dtype != S::DTYPE {
        return Err(format_err(
            origin,
            format!("stored dtype {dtype:?}, expected {:?}", S::DTYPE),
        ));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err(origin, "truncated header"));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let width = dtype.width();
    let body = &bytes[header..];
    if body.len() != numel * width {
        return Err(format_err(
            origin,
            format!(
                "payload holds {} bytes, shape {shape:?} needs {}",
                body.len(),
                numel * width
            ),
        ));
    }
    let data = body.chunks_exact(width).map(S::read_le).collect();
    Tensor::new(shape, data).map_err(|e| format_err(origin, e.to_string()))
}

pub fn write<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
