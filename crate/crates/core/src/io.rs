//! Binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HALT" | version: u32 = 1 | dtype: u8 | rank: u8 = 2 | rows: u64 | cols: u64 | payload
//! ```
//!
//! dtype 0 and 1 are dense f32 / f64 payloads in row-major order. dtype 2 is
//! a quantized tensor:
//!
//! ```text
//! format: u8 | granularity: u8 [| block_rows: u64 | block_cols: u64]
//! | n_scales: u64 | scales: f32 * n_scales | codes
//! ```
//!
//! with INT8 codes stored as one signed byte each and every other format's
//! rounded values stored as f64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::quantize::{Codes, Granularity, NumericFormat, QuantizedTensor};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"HALT";
pub const VERSION: u32 = 1;
const QUANTIZED: u8 = 2;
const HEADER_LEN: usize = 4 + 4 + 1 + 1 + 8 + 8;

/// Contents of a tensor file in its stored representation.
#[derive(Debug, Clone)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Quantized(QuantizedTensor),
}

impl StoredTensor {
    /// Converts to a dense tensor, dequantizing if necessary.
    pub fn into_dense<T: Element>(self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
            StoredTensor::Quantized(q) => crate::quantize::dequantize(&q),
        }
    }
}

fn header(out: &mut Vec<u8>, dtype: u8, rows: usize, cols: usize) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    out.push(2);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
}

pub fn encode_tensor<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * T::DTYPE.size());
    header(&mut out, T::DTYPE as u8, t.rows(), t.cols());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn encode_quantized(q: &QuantizedTensor) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, QUANTIZED, q.rows(), q.cols());
    out.push(q.format().code());
    match q.granularity() {
        Granularity::PerTensor => out.push(0),
        Granularity::PerRow => out.push(1),
        Granularity::PerColumn => out.push(2),
        Granularity::Block { rows, cols } => {
            out.push(3);
            out.extend_from_slice(&(rows as u64).to_le_bytes());
            out.extend_from_slice(&(cols as u64).to_le_bytes());
        }
        Granularity::MxBlock => out.push(4),
    }
    out.extend_from_slice(&(q.scales().len() as u64).to_le_bytes());
    for s in q.scales() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    match q.codes() {
        Codes::Int8(c) => out.extend(c.iter().map(|&v| v as u8)),
        Codes::Real(c) => {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Cursor over a byte slice that reports truncation in payload terms.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(Error::Truncated {
                expected: n,
                found: rest,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::BadHeader(format!("{what} overflows usize")))
    }
}

fn checked_len(a: usize, b: usize, width: usize) -> Result<usize> {
    a.checked_mul(b)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::BadHeader(format!("shape {a}x{b} is too large")))
}

pub fn decode(bytes: &[u8]) -> Result<StoredTensor> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let dtype = r.u8()?;
    let rank = r.u8()?;
    if rank != 2 {
        return Err(Error::BadHeader(format!("rank {rank}, expected 2")));
    }
    let rows = r.usize("rows")?;
    let cols = r.usize("cols")?;

    if dtype == QUANTIZED {
        return decode_quantized(&mut r, rows, cols).map(StoredTensor::Quantized);
    }
    let dtype = DType::from_code(dtype).ok_or_else(|| Error::BadHeader(format!("dtype {dtype}")))?;
    let payload = r.take(checked_len(rows, cols, dtype.size())?)?;
    Ok(match dtype {
        DType::F32 => StoredTensor::F32(dense(rows, cols, payload)?),
        DType::F64 => StoredTensor::F64(dense(rows, cols, payload)?),
    })
}

fn dense<T: Element>(rows: usize, cols: usize, payload: &[u8]) -> Result<Tensor<T>> {
    let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(rows, cols, data)
}

fn decode_quantized(r: &mut Reader<'_>, rows: usize, cols: usize) -> Result<QuantizedTensor> {
    let code = r.u8()?;
    let format = NumericFormat::from_code(code).ok_or_else(|| Error::BadHeader(format!("format code {code}")))?;
    let granularity = match r.u8()? {
        0 => Granularity::PerTensor,
        1 => Granularity::PerRow,
        2 => Granularity::PerColumn,
        3 => Granularity::Block {
            rows: r.usize("block rows")?,
            cols: r.usize("block cols")?,
        },
        4 => Granularity::MxBlock,
        g => return Err(Error::BadHeader(format!("granularity code {g}"))),
    };
    let n_scales = r.usize("scale count")?;
    let scales = r
        .take(checked_len(n_scales, 1, 4)?)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let codes = if format == NumericFormat::Int8 {
        Codes::Int8(r.take(checked_len(rows, cols, 1)?)?.iter().map(|&b| b as i8).collect())
    } else {
        Codes::Real(
            r.take(checked_len(rows, cols, 8)?)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        )
    };
    QuantizedTensor::from_parts(rows, cols, codes, scales, format, granularity)
}

pub fn write_tensor<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn write_quantized(path: impl AsRef<Path>, q: &QuantizedTensor) -> Result<()> {
    fs::write(path, encode_quantized(q))?;
    Ok(())
}

pub fn read_stored(path: impl AsRef<Path>) -> Result<StoredTensor> {
    decode(&fs::read(path)?)
}

/// Reads a dense tensor of element type `T`. Files stored at another
/// precision are converted; quantized files are dequantized.
pub fn read_tensor<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(read_stored(path)?.into_dense())
}
