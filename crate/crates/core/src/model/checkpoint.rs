//! Model checkpoint codec.
//!
//! Layout: `SKDM`, u32 version, u32 config length + UTF-8 `key=value` block,
//! u32 parameter count, then per parameter: u32 name length, name bytes,
//! u32 rank, u32 dims, little-endian f64 values. All integers little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, Seq2SeqModel};
use crate::error::{KdError, Result};
use crate::numerics::Scalar;

const MAGIC: &[u8; 4] = b"SKDM";
const VERSION: u32 = 1;

pub fn write_checkpoint<S: Scalar, W: Write>(model: &Seq2SeqModel<S>, mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config.to_kv(model.flavor);
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(KdError::Format(format!(
                "checkpoint truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut r: R) -> Result<Seq2SeqModel<S>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(KdError::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(KdError::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = c.u32()? as usize;
    let cfg_text = std::str::from_utf8(c.take(cfg_len)?)
        .map_err(|_| KdError::Format("config block is not UTF-8".into()))?;
    let (config, flavor) = ModelConfig::from_kv(cfg_text)?;
    let mut model = Seq2SeqModel::<S>::new(config, flavor, 0)?;
    let count = c.u32()? as usize;
    if count != model.params.len() {
        return Err(KdError::IncompatibleCheckpoint(format!(
            "checkpoint holds {count} parameters, architecture expects {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| KdError::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32()? as usize);
        }
        let t = model
            .params
            .get_mut(&name)
            .ok_or_else(|| KdError::IncompatibleCheckpoint(format!("unexpected parameter {name}")))?;
        if t.shape() != dims.as_slice() {
            return Err(KdError::IncompatibleCheckpoint(format!(
                "{name}: stored shape {dims:?}, expected {:?}",
                t.shape()
            )));
        }
        for v in t.data_mut() {
            *v = S::of(c.f64()?);
        }
    }
    if c.pos != bytes.len() {
        return Err(KdError::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok(model)
}

pub fn save_checkpoint<S: Scalar>(model: &Seq2SeqModel<S>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Seq2SeqModel<S>> {
    read_checkpoint(fs::File::open(path)?)
}
