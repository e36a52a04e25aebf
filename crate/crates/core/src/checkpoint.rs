//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PDGM"              4 bytes
//! version             u32 (= 1)
//! entry count         u32
//! per entry:
//!   name length       u32, then UTF-8 name bytes
//!   rank              u32, then rank × u64 dims
//!   payload offset    u64, byte offset from the start of the payload
//! payload             f64 values, entries back to back
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::numel;

pub const MAGIC: &[u8; 4] = b"PDGM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (_, e) in store.iter() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * e.data.len() as u64;
    }
    for (_, e) in store.iter() {
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            CheckpointError::Corrupt(format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ParamStore, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("entry name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()? as usize;
        manifest.push((name, shape, offset));
    }
    let payload = &buf[r.pos..];
    let mut store = ParamStore::new();
    let mut expected_offset = 0usize;
    for (name, shape, offset) in manifest {
        let n = numel(&shape);
        if offset != expected_offset {
            return Err(CheckpointError::Corrupt(format!(
                "entry {name}: offset {offset}, expected {expected_offset}"
            )));
        }
        let end = offset + 8 * n;
        if end > payload.len() {
            return Err(CheckpointError::Corrupt(format!("entry {name}: payload truncated")));
        }
        let data = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if store.id_of(&name).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate entry {name}")));
        }
        store.add(name, &shape, data);
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing payload bytes",
            payload.len() - expected_offset
        )));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore, CheckpointError> {
    from_bytes(&fs::read(path)?)
}
