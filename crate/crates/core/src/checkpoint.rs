//! Binary parameter files.
//!
//! Layout (little-endian): the magic `CATCH1`; a `u32` length and the model
//! config as `key=value` text; a `u32` tensor count; then per tensor a `u32`
//! name length, the UTF-8 name, a `u32` rank, `rank` `u32` dims and the
//! values as `f32`. Loading therefore rounds parameters to single precision,
//! and a save-load-save cycle reproduces the file byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::{model_from_text, model_to_text};
use crate::error::{CatchError, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 6] = b"CATCH1";

pub fn to_bytes(cfg: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    params.check_shapes(cfg)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let text = model_to_text(cfg);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(CatchError::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn text(&mut self, len: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(len, what)?)
            .map_err(|_| CatchError::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

pub fn from_bytes(data: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let mut c = Cursor { data, pos: 0 };
    if c.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(CatchError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let len = c.u32("config length")?;
    let cfg = model_from_text(c.text(len, "config")?)?;
    let mut params = ModelParams::zeros(&cfg);
    let count = c.u32("tensor count")?;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(CatchError::Checkpoint(format!(
            "{count} tensors stored, config implies {}",
            slots.len()
        )));
    }
    for (name, slot) in slots.iter_mut() {
        let n = c.u32("name length")?;
        let stored = c.text(n, "tensor name")?;
        if stored != name {
            return Err(CatchError::Checkpoint(format!("expected tensor `{name}`, found `{stored}`")));
        }
        let rank = c.u32("rank")?;
        let dims = (0..rank).map(|_| c.u32("dimension")).collect::<Result<Vec<_>>>()?;
        if dims != slot.shape() {
            return Err(CatchError::Checkpoint(format!(
                "tensor `{name}` has shape {dims:?}, config implies {:?}",
                slot.shape()
            )));
        }
        let bytes = c.take(4 * slot.len(), "tensor payload")?;
        for (v, b) in slot.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
    }
    drop(slots);
    if c.pos != data.len() {
        return Err(CatchError::Checkpoint(format!("{} trailing bytes", data.len() - c.pos)));
    }
    Ok((cfg, params))
}

pub fn save(path: impl AsRef<Path>, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(cfg, params)?;
    let mut f = std::fs::File::create(path).map_err(|e| CatchError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CatchError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams)> {
    let path = path.as_ref();
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| CatchError::io(path, e))?;
    from_bytes(&data)
}
