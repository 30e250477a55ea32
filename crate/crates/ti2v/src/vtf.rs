//! The VTF binary tensor format.
//!
//! Layout: magic `VTF1`, little-endian u32 rank, rank x u32 extents, then the
//! row-major f32 payload, little-endian. Checkpoints, datasets, and sampled
//! videos all use it.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ti2v_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VTF1";

pub fn write_bytes(tensor: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * tensor.rank() + 4 * tensor.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_bytes(bytes: &[u8], what: &str) -> Result<Tensor<f32>> {
    let fail = |msg: &str| Error::data(format!("{what}: {msg}"));
    if bytes.len() < 8 || bytes[..4] != MAGIC {
        return Err(fail("not a VTF file (bad magic)"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(fail("truncated shape header"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != header + 4 * numel {
        return Err(fail("payload length does not match shape"));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(Error::from)
}

pub fn save(tensor: &Tensor<f32>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&write_bytes(tensor))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    read_bytes(&bytes, &path.display().to_string())
}
