//! Flat little-endian tensor encoding.
//!
//! Layout: `b"FTSR"`, version `u32`, rank `u32`, `rank` dims as `u32`,
//! dtype tag `u32` (1 = f32, 2 = f64), then the raw values.

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FTSR";
pub const VERSION: u32 = 1;

/// Appends the encoding of `t` to `out`.
pub fn encode_into<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&T::DTYPE.tag().to_le_bytes());
    out.reserve(t.len() * T::DTYPE.width_bytes());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(t, &mut out);
    out
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let end = *pos + 4;
    let slice = bytes
        .get(*pos..end)
        .ok_or_else(|| Error::Format(format!("tensor header truncated at byte {pos}")))?;
    *pos = end;
    Ok(u32::from_le_bytes(slice.try_into().expect("4 bytes")))
}

/// Decodes one tensor from the front of `bytes`, converting to `T` if the
/// stored dtype differs. Returns the tensor and the number of bytes consumed.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing FTSR magic".into()));
    }
    let mut pos = 4;
    let version = read_u32(bytes, &mut pos)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let rank = read_u32(bytes, &mut pos)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(bytes, &mut pos)? as usize);
    }
    let tag = read_u32(bytes, &mut pos)?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    let n: usize = shape.iter().product();
    let width = dtype.width_bytes();
    let body = bytes
        .get(pos..pos + n * width)
        .ok_or_else(|| Error::Format(format!("tensor body truncated: need {} bytes", n * width)))?;
    let data: Vec<T> = match dtype {
        DType::F32 => body.chunks_exact(4).map(|c| T::from_f64c(f32::read_le(c) as f64)).collect(),
        DType::F64 => body.chunks_exact(8).map(|c| T::from_f64c(f64::read_le(c))).collect(),
    };
    Ok((Tensor::new(&shape, data)?, pos + n * width))
}
