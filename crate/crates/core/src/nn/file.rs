//! Model checkpoint format: magic `BFCK`, version, a JSON header with the
//! architecture and parameter layout, then the raw little-endian f32
//! parameter vector.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, LayoutEntry, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BFCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchSpec,
    layout: Vec<LayoutEntry>,
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    arch: &ArchSpec,
    params: &ModelParams,
) -> Result<()> {
    let header = CheckpointHeader {
        arch: arch.clone(),
        layout: params.layout.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(params.values.len() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(params.values.len() * 4);
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(ArchSpec, ModelParams)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a beamfed checkpoint".into()));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    if u16::from_le_bytes(v) != VERSION {
        return Err(Error::Format("unsupported checkpoint version".into()));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let json_len = u32::from_le_bytes(len4) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    r.read_exact(&mut len4)?;
    let count = u32::from_le_bytes(len4) as usize;
    let mut buf = vec![0u8; count * 4];
    r.read_exact(&mut buf)?;
    let values = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        header.arch,
        ModelParams {
            values,
            layout: header.layout,
        },
    ))
}
