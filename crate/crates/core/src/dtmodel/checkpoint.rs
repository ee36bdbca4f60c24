//! Binary checkpoint format:
//!
//! ```text
//! "ADTC1"
//! u32 metadata length, metadata bytes (UTF-8 `key=value` lines)
//! per tensor: u32 name length, name, u32 rank, rank x u32 dims, LE f32 data
//! ```
//!
//! All integers are little-endian. Tensors are stored as 32-bit floats, so
//! round trips are exact for `f32` parameters.

use std::collections::BTreeMap;
use std::path::Path;

use super::params::DTParams;
use super::tensor::Tensor;
use super::{DTConfig, Real};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ADTC1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serializes parameters and free-form metadata. Config keys take precedence
/// over `extra` entries with the same name.
pub fn write_checkpoint<F: Real>(p: &DTParams<F>, extra: &BTreeMap<String, String>) -> Vec<u8> {
    let mut meta = extra.clone();
    meta.extend(p.cfg.to_meta());
    let mut meta_text = String::new();
    for (k, v) in &meta {
        meta_text.push_str(k);
        meta_text.push('=');
        meta_text.push_str(v);
        meta_text.push('\n');
    }

    let mut out = Vec::with_capacity(p.num_params() * 4 + meta_text.len() + 64);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, meta_text.len());
    out.extend_from_slice(meta_text.as_bytes());
    for (name, t) in p.tensors() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape.len());
        for &d in &t.shape {
            put_u32(&mut out, d);
        }
        for x in &t.data {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parses a checkpoint into `f32` parameters and the full metadata map.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(DTParams<f32>, BTreeMap<String, String>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic or unsupported version".into()));
    }
    let meta_len = r.u32()?;
    let meta_text = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad metadata line {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let cfg = DTConfig::from_meta(&meta)?;

    let mut stored: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    while !r.done() {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        stored.insert(name, Tensor { shape, data });
    }

    let mut p = DTParams::<f32>::zeros(&cfg);
    for (name, t) in p.tensors_mut() {
        let src = stored
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if src.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                src.shape, t.shape
            )));
        }
        *t = src;
    }
    if let Some(name) = stored.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok((p, meta))
}

pub fn save_checkpoint<F: Real>(p: &DTParams<F>, extra: &BTreeMap<String, String>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(p, extra)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(DTParams<f32>, BTreeMap<String, String>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
