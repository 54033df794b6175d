//! `VOSP` raw tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "VOSP"
//! version u16      1
//! dtype   u8       1 = u8, 2 = f32, 3 = f64
//! rank    u8
//! dims    rank × u64
//! payload product(dims) × dtype size bytes
//! ```
//!
//! The header is validated in full before any payload byte is read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, VosError};

pub const MAGIC: &[u8; 4] = b"VOSP";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    U8 = 1,
    F32 = 2,
    F64 = 3,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DType::U8),
            2 => Ok(DType::F32),
            3 => Ok(DType::F64),
            other => Err(VosError::Format(format!("unknown dtype tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            TensorData::U8(_) => DType::U8,
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected = element_count(&dims)?;
        if expected != data.len() {
            return Err(VosError::shape(format!(
                "tensor dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(VosError::shape("tensor rank exceeds 255"));
        }
        Ok(Self { dims, data })
    }

    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(dims, TensorData::F64(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// Payload widened to `f64`.
    pub fn into_f64(self) -> Result<Vec<f64>> {
        Ok(match self.data {
            TensorData::F64(v) => v,
            TensorData::F32(v) => v.into_iter().map(f64::from).collect(),
            TensorData::U8(v) => v.into_iter().map(f64::from).collect(),
        })
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| VosError::shape(format!("tensor dims {dims:?} overflow")))
}

pub fn encode_tensor<W: Write>(out: &mut W, tensor: &RawTensor) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&[tensor.dtype() as u8, tensor.dims.len() as u8])?;
    for &d in &tensor.dims {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    match &tensor.data {
        TensorData::U8(v) => out.write_all(v)?,
        TensorData::F32(v) => {
            for x in v {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::F64(v) => {
            for x in v {
                out.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads one tensor. Header problems are format errors; a payload shorter than
/// the declared dims is an I/O error (unexpected EOF).
pub fn decode_tensor<R: Read>(input: &mut R) -> Result<RawTensor> {
    let mut head = [0u8; 8];
    input.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(VosError::Format(format!("bad magic {:?}", &head[..4])));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(VosError::Format(format!("unsupported version {version}")));
    }
    let dtype = DType::from_tag(head[6])?;
    let rank = head[7] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut raw = [0u8; 8];
        input.read_exact(&mut raw)?;
        let d = usize::try_from(u64::from_le_bytes(raw))
            .map_err(|_| VosError::Format("dimension does not fit in memory".into()))?;
        dims.push(d);
    }
    let count = element_count(&dims).map_err(|_| {
        VosError::from(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "declared dims exceed any possible payload",
        ))
    })?;
    let bytes = count.checked_mul(dtype.size()).ok_or_else(|| {
        VosError::from(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "declared payload size overflows",
        ))
    })?;
    // Bounded by `take`: the header length alone never sizes the allocation.
    let mut payload = Vec::new();
    input.take(bytes as u64).read_to_end(&mut payload)?;
    if payload.len() != bytes {
        return Err(VosError::from(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("payload has {} bytes, header declares {bytes}", payload.len()),
        )));
    }
    let data = match dtype {
        DType::U8 => TensorData::U8(payload),
        DType::F32 => TensorData::F32(
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        DType::F64 => TensorData::F64(
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
    };
    RawTensor::new(dims, data)
}

pub fn write_tensor(path: &Path, tensor: &RawTensor) -> Result<()> {
    let file = File::create(path).map_err(|e| VosError::io(path, e))?;
    let mut out = BufWriter::new(file);
    encode_tensor(&mut out, tensor).map_err(|e| VosError::io(path, e))?;
    out.flush().map_err(|e| VosError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    let file = File::open(path).map_err(|e| VosError::io(path, e))?;
    decode_tensor(&mut BufReader::new(file)).map_err(|e| match e {
        VosError::Io { path: None, source } => VosError::io(path, source),
        other => other,
    })
}
