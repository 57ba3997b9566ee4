//! Self-describing binary container for exported float maps.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic   4 bytes  "CVTC"
//! version u32      1
//! dtype   u32      1 = f32
//! rank    u32
//! dims    u32 * rank
//! data    f32 * product(dims), row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CVTC";
const VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;

/// Writes an f64 tensor as an f32 container file.
pub fn write_f32(path: &Path, shape: &[usize], data: impl Iterator<Item = f64>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = fs::File::create(path)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&DTYPE_F32.to_le_bytes())?;
    out.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut count = 0usize;
    for v in data {
        out.write_all(&(v as f32).to_le_bytes())?;
        count += 1;
    }
    let expected: usize = shape.iter().product();
    if count != expected {
        return Err(Error::Shape(format!(
            "container data has {count} values for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Reads a container file back as `(shape, values)`.
pub fn read_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut file = fs::File::open(path)
        .map_err(|e| Error::Validation(format!("cannot open container {path:?}: {e}")))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Validation(format!(
            "bad container magic {magic:?} in {path:?}"
        )));
    }
    let mut word = [0u8; 4];
    let mut next_u32 = |file: &mut fs::File| -> Result<u32> {
        file.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let version = next_u32(&mut file)?;
    if version != VERSION {
        return Err(Error::Validation(format!(
            "unsupported container version {version}"
        )));
    }
    let dtype = next_u32(&mut file)?;
    if dtype != DTYPE_F32 {
        return Err(Error::Validation(format!("unsupported dtype tag {dtype}")));
    }
    let rank = next_u32(&mut file)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(next_u32(&mut file)? as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        file.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    Ok((shape, data))
}
