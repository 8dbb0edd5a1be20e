//! Binary tensor interchange format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes   "SFMT"
//! dtype   u32       element width in bytes: 8 (f64) or 4 (f32)
//! ndim    u32
//! dims    ndim × u64
//! payload prod(dims) elements, little-endian IEEE 754
//! ```

use std::io::{self, Read, Write};

use crate::error::TensorError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFMT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u32 {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor, dtype: DType) -> Result<(), TensorIoError> {
    w.write_all(MAGIC)?;
    w.write_all(&dtype.code().to_le_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match dtype {
        DType::F64 => t
            .data()
            .iter()
            .try_for_each(|v| w.write_all(&v.to_le_bytes()))?,
        DType::F32 => t
            .data()
            .iter()
            .try_for_each(|v| w.write_all(&(*v as f32).to_le_bytes()))?,
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor; `f32` payloads are widened to `f64`.
pub fn read_tensor<R: Read>(mut r: R) -> Result<(Tensor, DType), TensorIoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorIoError::Format(format!("magic {magic:?}")));
    }
    let dtype = match read_u32(&mut r)? {
        8 => DType::F64,
        4 => DType::F32,
        other => return Err(TensorIoError::Format(format!("dtype code {other}"))),
    };
    let ndim = read_u32(&mut r)? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(TensorIoError::Format(format!("ndim {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let width = dtype.code() as usize;
    let mut payload = vec![0u8; n * width];
    r.read_exact(&mut payload)?;
    let data = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}
