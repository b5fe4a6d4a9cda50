//! Binary tensor dump format used by checkpoints.
//!
//! Layout (all little-endian): `rank: u32`, then `rank` extents as `u32`,
//! then the elements as `f64` in row-major order. Values are always stored
//! as f64 regardless of the in-memory precision, so checkpoints written by
//! an f32 run and an f64 run of identical weights are byte-identical.

use std::io::{self, Read, Write};

use super::{Scalar, Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DumpError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt dump: {0}")]
    Corrupt(String),
}

/// Serialize one tensor in dump format.
pub fn write_dump<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<(), DumpError> {
    let dims = t.shape().dims();
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

/// Read one tensor in dump format. Always yields f64; cast as needed.
pub fn read_dump<R: Read>(r: &mut R) -> Result<Tensor<f64>, DumpError> {
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > Shape::MAX_RANK {
        return Err(DumpError::Corrupt(format!("rank {rank} out of range")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r)? as usize);
    }
    let shape = Shape::new(dims).map_err(|e| DumpError::Corrupt(e.to_string()))?;
    let mut data = vec![0.0f64; shape.count()];
    let mut buf = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Tensor::new(shape, data).map_err(|e| DumpError::Corrupt(e.to_string()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DumpError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
