//! Binary network checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! | field          | type          |
//! |----------------|---------------|
//! | magic          | `b"PAWF"`     |
//! | version        | u32 (= 1)     |
//! | input_dim      | u32           |
//! | hidden_dim     | u32           |
//! | num_blocks     | u32           |
//! | output_dim     | u32           |
//! | activation     | u32 (0 gelu, 1 relu) |
//! | extension_len  | u32           |
//! | extension      | `extension_len` bytes, owned by the caller |
//! | num_params     | u64           |
//! | params         | `num_params` x f32 |
//!
//! The extension block carries model-level descriptors (heads, support,
//! schedule, observation scaling); a bare network writes an empty one.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::net::{Activation, NetParams, NetSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PAWF";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    spec: &NetSpec,
    params: &NetParams,
    extension: &[u8],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    for dim in [spec.input_dim, spec.hidden_dim, spec.num_blocks, spec.output_dim] {
        w.write_u32::<LittleEndian>(to_u32(dim)?)?;
    }
    w.write_u32::<LittleEndian>(spec.activation.tag())?;
    w.write_u32::<LittleEndian>(to_u32(extension.len())?)?;
    w.write_all(extension)?;
    w.write_u64::<LittleEndian>(params.len() as u64)?;
    for &v in params.as_slice() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(NetSpec, NetParams, Vec<u8>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("checkpoint magic is not PAWF".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>()? as usize;
    }
    let activation = Activation::from_tag(r.read_u32::<LittleEndian>()?)?;
    let spec = NetSpec::new(dims[0], dims[1], dims[2], dims[3], activation)
        .map_err(|e| Error::Format(format!("checkpoint spec: {e}")))?;
    let ext_len = r.read_u32::<LittleEndian>()? as usize;
    let mut extension = vec![0u8; ext_len];
    r.read_exact(&mut extension)?;
    let n = r.read_u64::<LittleEndian>()? as usize;
    if n != spec.num_params() {
        return Err(Error::Format(format!(
            "checkpoint holds {n} parameters, spec needs {}",
            spec.num_params()
        )));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(r.read_f32::<LittleEndian>()? as f64);
    }
    let params = NetParams::from_vec(&spec, values)?;
    Ok((spec, params, extension))
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))
}
