//! Versioned binary checkpoint format.
//!
//! Layout: magic `NOMAEckpt`, version u32, tensor count u32, then per tensor
//! (sorted by name): name length u32 + UTF-8 name, dtype tag u8, rank u8,
//! dims as u64 each, row-major little-endian payload. Round-trips are
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::sparsenn::params::{Param, ParamStore};
use crate::sparsenn::scalar::{Dtype, Scalar};

const MAGIC: &[u8; 9] = b"NOMAEckpt";
const VERSION: u32 = 1;

/// Serialize the store to `out`.
pub fn write_checkpoint<T: Scalar, W: Write>(params: &ParamStore<T>, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, param) in params.iter() {
        out.write_u32::<LittleEndian>(name.len() as u32)?;
        out.write_all(name.as_bytes())?;
        out.write_u8(T::DTYPE.tag())?;
        let dims = param.dims();
        out.write_u8(dims.len() as u8)?;
        for d in &dims {
            out.write_u64::<LittleEndian>(*d as u64)?;
        }
        let mut payload = Vec::with_capacity(param.len() * T::DTYPE.size());
        for &v in param.iter() {
            v.write_le(&mut payload);
        }
        out.write_all(&payload)?;
    }
    Ok(())
}

/// Parse a checkpoint produced by [`write_checkpoint`] with the same dtype.
pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<ParamStore<T>> {
    let mut magic = [0u8; 9];
    input.read_exact(&mut magic).map_err(|_| Error::Format("checkpoint too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = input.read_u32::<LittleEndian>()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = input.read_u32::<LittleEndian>()? as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!("tensor name length {name_len} out of range")));
        }
        let mut name_bytes = vec![0u8; name_len];
        input.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let tag = input.read_u8()?;
        let dtype =
            Dtype::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint tensor {name} is {dtype:?}, loader expects {:?}",
                T::DTYPE
            )));
        }
        let rank = input.read_u8()?;
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(input.read_u64::<LittleEndian>()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut payload = vec![0u8; len * dtype.size()];
        input.read_exact(&mut payload)?;
        let values: Vec<T> =
            payload.chunks_exact(dtype.size()).map(|chunk| T::read_le(chunk)).collect();
        let param = match dims.len() {
            1 => Param::Vector(Array1::from_vec(values)),
            2 => Param::Matrix(
                Array2::from_shape_vec((dims[0], dims[1]), values)
                    .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?,
            ),
            r => return Err(Error::Format(format!("tensor {name} has unsupported rank {r}"))),
        };
        params.insert(name, param);
    }
    Ok(params)
}

/// Write a checkpoint file.
pub fn save_checkpoint<T: Scalar>(params: &ParamStore<T>, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    write_checkpoint(params, &mut writer)?;
    writer.flush()?;
    Ok(())
}

/// Read a checkpoint file.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let file = File::open(path)?;
    read_checkpoint(BufReader::new(file))
}
