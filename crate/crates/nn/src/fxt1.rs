//! FXT1: a flat container of named little-endian arrays.
//!
//! Layout: magic `FXT1`, `u32` version, `u32` array count, then per array a
//! `u16` name length, UTF-8 name, `u8` dtype tag, `u8` rank, `u32` dims and
//! the little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FXT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    I64 = 3,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Self::F32,
            1 => Self::F64,
            2 => Self::U8,
            3 => Self::I64,
            t => return Err(NnError::Format(format!("unknown dtype tag {t}"))),
        })
    }

    fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 | Self::I64 => 8,
            Self::U8 => 1,
        }
    }
}

/// One stored array with its raw payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

impl Array {
    pub fn from_tensor<S: Scalar>(name: &str, t: &Tensor<S>) -> Self {
        let mut payload = Vec::with_capacity(t.len() * S::BYTES);
        for v in t.data() {
            v.write_le(&mut payload);
        }
        Self {
            name: name.to_string(),
            dtype: DType::from_tag(S::DTYPE).expect("scalar tags are valid"),
            dims: t.dims().iter().map(|&d| d as u32).collect(),
            payload,
        }
    }

    pub fn from_bytes(name: &str, bytes: &[u8]) -> Self {
        Self {
            name: name.to_string(),
            dtype: DType::U8,
            dims: vec![bytes.len() as u32],
            payload: bytes.to_vec(),
        }
    }

    pub fn from_i64(name: &str, values: &[i64]) -> Self {
        Self {
            name: name.to_string(),
            dtype: DType::I64,
            dims: vec![values.len() as u32],
            payload: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        if self.dtype as u8 != S::DTYPE {
            return Err(NnError::Format(format!(
                "array {} has dtype {:?}, expected tag {}",
                self.name,
                self.dtype,
                S::DTYPE
            )));
        }
        let data = self.payload.chunks(S::BYTES).map(S::read_le).collect();
        Tensor::new(self.dims.iter().map(|&d| d as usize).collect(), data)
    }

    pub fn to_i64(&self) -> Result<Vec<i64>> {
        if self.dtype != DType::I64 {
            return Err(NnError::Format(format!("array {} is not i64", self.name)));
        }
        Ok(self
            .payload
            .chunks(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn encode(arrays: &[Array]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        let name = a.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(NnError::Format(format!("array name too long: {}", a.name)));
        }
        if a.dims.len() > u8::MAX as usize {
            return Err(NnError::Format(format!("rank too large for {}", a.name)));
        }
        let n: usize = a.dims.iter().map(|&d| d as usize).product();
        if n * a.dtype.width() != a.payload.len() {
            return Err(NnError::Format(format!("payload size mismatch for {}", a.name)));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(a.dtype as u8);
        out.push(a.dims.len() as u8);
        for d in &a.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&a.payload);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Format("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Array>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(NnError::Format("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| NnError::Format("array name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_tag(c.u8()?)?;
        let rank = c.u8()? as usize;
        let dims = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().map(|&d| d as usize).product();
        let payload = c.take(n * dtype.width())?.to_vec();
        arrays.push(Array {
            name,
            dtype,
            dims,
            payload,
        });
    }
    if c.pos != bytes.len() {
        return Err(NnError::Format("trailing bytes after last array".into()));
    }
    Ok(arrays)
}

pub fn write_file(path: &Path, arrays: &[Array]) -> Result<()> {
    let bytes = encode(arrays)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<Array>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
