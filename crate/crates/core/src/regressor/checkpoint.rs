//! Binary checkpoints: `PSRP`, u32 version, u32-length JSON config, then the
//! learnable tensors and the running buffers, each list prefixed by a u32
//! count. A tensor is a u32-length name, u32 rank, u64 dims and
//! little-endian f64 values. All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{EpochLog, Param, Regressor, RegressorConfig, RegressorParams, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSRP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_params(out: &mut Vec<u8>, ps: &[Param]) {
    put_u32(out, ps.len() as u32);
    for p in ps {
        put_u32(out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(out, p.value.shape.len() as u32);
        for &d in &p.value.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.value.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(model: &Regressor) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    put_params(&mut out, &model.params().tensors);
    put_params(&mut out, &model.params().buffers);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn params(&mut self) -> Result<Vec<Param>> {
        let n = self.u32()? as usize;
        let mut out = Vec::new();
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not utf-8".into()))?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor {name} is too large")))?;
            let bytes = self.take(count.checked_mul(8).unwrap_or(usize::MAX))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push(Param {
                name,
                value: Tensor::new(shape, data),
            });
        }
        Ok(out)
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Regressor> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let cfg: RegressorConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config block: {e}")))?;
    let tensors = r.params()?;
    let buffers = r.params()?;
    if r.pos != buf.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Regressor::from_params(cfg, RegressorParams { tensors, buffers })
}

pub fn save_checkpoint(path: &Path, model: &Regressor) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Regressor> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf).map_err(|e| match e {
        Error::CorruptCheckpoint(m) => Error::CorruptCheckpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// `epoch,mean_loss,lr` rows.
pub fn write_loss_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "epoch,mean_loss,lr").unwrap();
    for l in log {
        writeln!(out, "{},{},{}", l.epoch, l.mean_loss, l.lr).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
