//! Binary tensor records.
//!
//! Layout (little-endian): `b"DPAT"`, `u8` rank, four `u32` extents (unused
//! trailing extents are written as 1), `u8` dtype tag (0 = f64, 1 = f32),
//! then the row-major payload.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{DpaError, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"DPAT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }
}

/// Writes one tensor record and returns the number of bytes written.
pub fn write_tensor<W: Write>(out: &mut W, tensor: &Tensor, dtype: DType) -> Result<usize> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&[tensor.rank() as u8])?;
    let dims = tensor.dims4();
    for d in dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    out.write_all(&[dtype.tag()])?;
    let mut written = 4 + 1 + 16 + 1;
    match dtype {
        DType::F64 => {
            for v in tensor.data() {
                out.write_all(&v.to_le_bytes())?;
            }
            written += 8 * tensor.numel();
        }
        DType::F32 => {
            for v in tensor.data() {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
            written += 4 * tensor.numel();
        }
    }
    Ok(written)
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let mut header = [0u8; 22];
    input.read_exact(&mut header)?;
    if &header[..4] != TENSOR_MAGIC {
        return Err(DpaError::Format("bad tensor magic".into()));
    }
    let rank = header[4] as usize;
    if rank > super::MAX_RANK {
        return Err(DpaError::Format(format!("tensor rank {rank} exceeds 4")));
    }
    let dims: Vec<usize> = (0..4)
        .map(|i| {
            let b = &header[5 + 4 * i..9 + 4 * i];
            u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize
        })
        .collect();
    let shape = dims[..rank].to_vec();
    if shape.contains(&0) {
        return Err(DpaError::Format(format!("zero extent in {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    let data = match header[21] {
        0 => {
            let mut buf = vec![0u8; numel * 8];
            input.read_exact(&mut buf)?;
            buf.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect()
        }
        1 => {
            let mut buf = vec![0u8; numel * 4];
            input.read_exact(&mut buf)?;
            buf.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                .collect()
        }
        t => return Err(DpaError::Format(format!("unknown dtype tag {t}"))),
    };
    Tensor::new(&shape, data)
}
