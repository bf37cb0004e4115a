//! `M3NCKPT1` parameter files: magic, `u32` record count, then per record a
//! `u32`-length-prefixed UTF-8 name, `u32` rank, `u32` dims and `f32` values,
//! all little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"M3NCKPT1";

pub fn checkpoint_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parse checkpoint bytes. Every entry comes back trainable.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::BadMagic { expected: "M3NCKPT1" });
    }
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.add(name, Tensor::new(shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(store)
}

pub fn write_checkpoint(store: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(store))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    parse_checkpoint(&fs::read(path)?)
}
