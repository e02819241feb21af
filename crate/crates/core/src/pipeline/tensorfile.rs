//! Binary tensor container.
//!
//! Layout: magic `DFT1`, one dtype byte, one rank byte, `rank` extents as
//! u64 little-endian, then the row-major payload. Dtype 0 is f32 LE and
//! dtype 1 is f64 LE.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DFT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }
}

/// Serializes `t`. With [`Dtype::F32`] every value is rounded to the
/// nearest f32.
pub fn encode(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.shape().len())
        .map_err(|_| Error::Format(format!("rank {} does not fit in a byte", t.shape().len())))?;
    let mut out = Vec::with_capacity(6 + 8 * rank as usize + dtype.width() * t.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(rank);
    for &n in t.shape() {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

/// Parses a container. Trailing bytes, truncation and extents whose
/// product overflows are errors.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, Dtype)> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing DFT1 magic".into()));
    }
    let dtype = Dtype::from_code(bytes[4])?;
    let rank = bytes[5] as usize;
    let header = 6 + 8 * rank;
    if bytes.len() < header {
        return Err(Error::Format(format!("truncated header for rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for k in 0..rank {
        let raw: [u8; 8] = bytes[6 + 8 * k..14 + 8 * k]
            .try_into()
            .expect("8-byte slice");
        let n = usize::try_from(u64::from_le_bytes(raw))
            .map_err(|_| Error::Format("extent exceeds address space".into()))?;
        count = count
            .checked_mul(n)
            .ok_or_else(|| Error::Format("extent product overflows".into()))?;
        shape.push(n);
    }
    let payload = count
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if bytes.len() - header != payload {
        return Err(Error::Format(format!(
            "payload has {} bytes, extents {shape:?} need {payload}",
            bytes.len() - header
        )));
    }
    let body = &bytes[header..];
    let data: Vec<f64> = match dtype {
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
        Dtype::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

pub fn write(path: &std::path::Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    std::fs::write(path, encode(t, dtype)?)?;
    Ok(())
}

pub fn read(path: &std::path::Path) -> Result<Tensor> {
    Ok(decode(&std::fs::read(path)?)?.0)
}
