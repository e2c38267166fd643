//! The IDX container used by the MNIST distribution.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxType {
    U8,
    I8,
    I16,
    I32,
    F32,
    F64,
}

impl IdxType {
    pub fn code(self) -> u8 {
        match self {
            IdxType::U8 => 0x08,
            IdxType::I8 => 0x09,
            IdxType::I16 => 0x0B,
            IdxType::I32 => 0x0C,
            IdxType::F32 => 0x0D,
            IdxType::F64 => 0x0E,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x08 => IdxType::U8,
            0x09 => IdxType::I8,
            0x0B => IdxType::I16,
            0x0C => IdxType::I32,
            0x0D => IdxType::F32,
            0x0E => IdxType::F64,
            _ => return None,
        })
    }

    pub fn width(self) -> usize {
        match self {
            IdxType::U8 | IdxType::I8 => 1,
            IdxType::I16 => 2,
            IdxType::I32 | IdxType::F32 => 4,
            IdxType::F64 => 8,
        }
    }
}

/// A parsed IDX tensor. `data` keeps the file's big-endian element bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxTensor {
    pub dtype: IdxType,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn idx_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Idx {
        offset,
        reason: reason.into(),
    }
}

impl IdxTensor {
    pub fn new(dtype: IdxType, dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected = dims.iter().product::<usize>() * dtype.width();
        if data.len() != expected {
            return Err(Error::validation(format!(
                "buffer holds {} bytes, dims need {expected}",
                data.len()
            )));
        }
        Ok(IdxTensor { dtype, dims, data })
    }

    /// The header's 32-bit magic: `dtype << 8 | ndim`.
    pub fn magic(&self) -> u32 {
        (self.dtype.code() as u32) << 8 | self.dims.len() as u32
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements converted to `f64`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        let w = self.dtype.width();
        self.data
            .chunks_exact(w)
            .map(|c| match self.dtype {
                IdxType::U8 => c[0] as f64,
                IdxType::I8 => c[0] as i8 as f64,
                IdxType::I16 => i16::from_be_bytes([c[0], c[1]]) as f64,
                IdxType::I32 => i32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
                IdxType::F32 => f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
                IdxType::F64 => f64::from_be_bytes(c.try_into().expect("chunk of 8")),
            })
            .collect()
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(idx_err(bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(idx_err(0, "magic number must start with two zero bytes"));
    }
    let dtype = IdxType::from_code(bytes[2]).ok_or_else(|| idx_err(2, format!("unsupported type code {:#04x}", bytes[2])))?;
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(idx_err(3, "zero dimensions"));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut off = 4;
    for _ in 0..ndim {
        let b = bytes
            .get(off..off + 4)
            .ok_or_else(|| idx_err(bytes.len(), "truncated dimension sizes"))?;
        dims.push(u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize);
        off += 4;
    }
    let need = dims
        .iter()
        .try_fold(dtype.width(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| idx_err(4, "dimension product overflows"))?;
    let body = &bytes[off..];
    if body.len() < need {
        return Err(idx_err(
            bytes.len(),
            format!("data truncated: need {need} bytes after header, found {}", body.len()),
        ));
    }
    if body.len() > need {
        return Err(idx_err(off + need, format!("{} trailing bytes", body.len() - need)));
    }
    Ok(IdxTensor {
        dtype,
        dims,
        data: body.to_vec(),
    })
}

pub fn write_idx(t: &IdxTensor) -> Vec<u8> {
    let mut out = vec![0, 0, t.dtype.code(), t.dims.len() as u8];
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&t.data);
    out
}

/// Reads an IDX file, inflating it first when it carries the gzip magic.
pub fn read_idx_file(path: &Path) -> Result<IdxTensor> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut buf = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut buf)?;
        parse_idx(&buf)
    } else {
        parse_idx(&raw)
    }
}

/// Image stack as `(count, pixels per image, row-major f64 pixels)`.
pub fn load_images(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let t = read_idx_file(path)?;
    images_from(&t)
}

pub fn images_from(t: &IdxTensor) -> Result<(usize, usize, Vec<f64>)> {
    if t.magic() != IMAGES_MAGIC {
        return Err(idx_err(0, format!("image magic {} (expected {IMAGES_MAGIC})", t.magic())));
    }
    Ok((t.dims[0], t.dims[1] * t.dims[2], t.to_f64()))
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    labels_from(&read_idx_file(path)?)
}

pub fn labels_from(t: &IdxTensor) -> Result<Vec<usize>> {
    if t.magic() != LABELS_MAGIC {
        return Err(idx_err(0, format!("label magic {} (expected {LABELS_MAGIC})", t.magic())));
    }
    Ok(t.data.iter().map(|&b| b as usize).collect())
}
