//! `TXF1` checkpoints: magic, u32 length + JSON config, u32 tensor count,
//! then per tensor a u32-prefixed name, u32 rank, u64 dims, a dtype byte
//! (4 or 8) and little-endian values.

use std::path::Path;

use super::params::{ModelConfig, ModelParams, Tensor};
use super::real::Real;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TXF1";

pub fn checkpoint_bytes<R: Real>(p: &ModelParams<R>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = serde_json::to_vec(&p.config)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(p.tensors.len() as u32).to_le_bytes());
    for t in &p.tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(R::BYTES as u8);
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes_vec());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.buf.len() as u64,
                reason: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }
}

/// Values are converted to `R` whatever precision the file stores.
pub fn checkpoint_from_bytes<R: Real>(buf: &[u8]) -> Result<ModelParams<R>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let n = r.u32()? as usize;
    let cfg_start = r.pos;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format {
        offset: cfg_start as u64,
        reason: format!("config: {e}"),
    })?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let dtype = r.take(1)?[0];
        let numel: usize = shape.iter().product();
        let data: Vec<R> = match dtype {
            4 => r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| R::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            8 => r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| R::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
            other => return Err(r.fail(format!("unknown dtype width {other}"))),
        };
        tensors.push(Tensor { name, shape, data });
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes"));
    }
    ModelParams::from_tensors(&config, tensors)
}

pub fn save_checkpoint<R: Real>(p: &ModelParams<R>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(p)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<ModelParams<R>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&buf)
}
