//! `SDAT` tensor files: magic, version, dtype, ndim, u32 LE dims, LE payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Labels, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"SDAT";
pub const TENSOR_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;

/// Decoded payload of a tensor file.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    U8 { dims: Vec<usize>, data: Vec<u8> },
}

fn header(out: &mut Vec<u8>, dtype: u8, dims: &[usize]) -> Result<()> {
    if dims.len() > u8::MAX as usize {
        return Err(Error::Format(format!("{} dims exceed the format limit", dims.len())));
    }
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

pub fn encode_f32(t: &Tensor<f32>, out: &mut Vec<u8>) -> Result<()> {
    header(out, DTYPE_F32, t.dims())?;
    out.reserve(4 * t.numel());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_u8(dims: &[usize], data: &[u8], out: &mut Vec<u8>) -> Result<()> {
    header(out, DTYPE_U8, dims)?;
    out.extend_from_slice(data);
    Ok(())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| {
        Error::Format(format!("truncated tensor data: need {} bytes at offset {}, have {}", n, pos, bytes.len()))
    })?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

/// Decodes one tensor starting at `bytes[0]`; returns it and the bytes used.
pub fn decode(bytes: &[u8]) -> Result<(TensorData, usize)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let version = take(bytes, &mut pos, 1)?[0];
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let dtype = take(bytes, &mut pos, 1)?[0];
    let ndim = take(bytes, &mut pos, 1)?[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let b = take(bytes, &mut pos, 4)?;
        dims.push(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize);
    }
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("dims overflow".into()))?;
    let data = match dtype {
        DTYPE_F32 => {
            let raw = take(bytes, &mut pos, n.checked_mul(4).ok_or_else(|| Error::Format("dims overflow".into()))?)?;
            let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            TensorData::F32(Tensor::new(dims, vals)?)
        }
        DTYPE_U8 => TensorData::U8 { data: take(bytes, &mut pos, n)?.to_vec(), dims },
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    Ok((data, pos))
}

fn decode_exact(bytes: &[u8]) -> Result<TensorData> {
    let (d, used) = decode(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after tensor", bytes.len() - used)));
    }
    Ok(d)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::new();
    encode_f32(t, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    match decode_exact(&fs::read(path)?)? {
        TensorData::F32(t) => Ok(t),
        TensorData::U8 { .. } => Err(Error::Format(format!("{} holds u8 data, expected f32", path.display()))),
    }
}

pub fn write_labels(path: &Path, l: &Labels) -> Result<()> {
    let mut buf = Vec::new();
    encode_u8(&l.dims(), l.data(), &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Labels> {
    match decode_exact(&fs::read(path)?)? {
        TensorData::U8 { dims, data } => {
            let dims: [usize; 3] = match dims.len() {
                2 => [1, dims[0], dims[1]],
                3 => [dims[0], dims[1], dims[2]],
                _ => return Err(Error::Format(format!("label map with dims {dims:?}"))),
            };
            Labels::new(dims, data)
        }
        TensorData::F32(_) => Err(Error::Format(format!("{} holds f32 data, expected labels", path.display()))),
    }
}
