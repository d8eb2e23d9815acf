//! Checkpoint file format: magic, format version, then named parameter
//! blobs (name length + name + shape rank + extents + little-endian f32).

use std::io::{Read, Write};

use super::{NumericError, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"PLOCKPT\0";
const VERSION: u32 = 1;

pub fn write_checkpoint(store: &ParamStore, mut w: impl Write) -> Result<(), NumericError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, tensor) in store.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ParamStore, NumericError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumericError::Checkpoint {
            reason: "bad magic".into(),
        });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NumericError::Checkpoint {
            reason: format!("unsupported version {version}"),
        });
    }
    let count = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(NumericError::Checkpoint {
                reason: format!("implausible name length {name_len}"),
            });
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NumericError::Checkpoint {
            reason: "parameter name is not utf-8".into(),
        })?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(NumericError::Checkpoint {
                reason: format!("implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        store.insert(&name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

fn read_u32(r: &mut impl Read) -> Result<u32, NumericError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
