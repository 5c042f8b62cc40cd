//! Binary checkpoint: magic, version, config JSON, then every tensor as
//! name, freeze flag, shape and little-endian f64 data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"DATTNCKP";
pub const VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())?;
    put_u64(&mut out, cfg.len() as u64);
    out.extend_from_slice(&cfg);
    put_u64(&mut out, model.store.len() as u64);
    for p in model.store.iter() {
        put_u64(&mut out, p.name.len() as u64);
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.frozen));
        put_u64(&mut out, p.tensor.shape().len() as u64);
        for &d in p.tensor.shape() {
            put_u64(&mut out, d as u64);
        }
        put_u64(&mut out, p.tensor.numel() as u64);
        out.extend_from_slice(&p.tensor.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > (self.buf.len() - self.pos) as u64 {
            return Err(Error::Checkpoint(format!("length field {v} exceeds remaining file size")));
        }
        Ok(v as usize)
    }
}

/// Decodes a checkpoint. With `expect`, the stored tensors must fit that
/// config instead of the one embedded in the file.
pub fn from_bytes(buf: &[u8], expect: Option<&ModelConfig>) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("version {version} unsupported (expected {VERSION})")));
    }
    let n = r.len()?;
    let stored: ModelConfig = serde_json::from_slice(r.take(n)?)?;
    let cfg = expect.unwrap_or(&stored);
    let mut model = Model::new(cfg, 0)?;
    let count = r.u64()? as usize;
    if count != model.store.len() {
        return Err(Error::Shape(format!("checkpoint has {count} tensors, config expects {}", model.store.len())));
    }
    for _ in 0..count {
        let n = r.len()?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let frozen = r.take(1)?[0] != 0;
        let ndim = r.len()?;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = r.u64()? as usize;
        if shape.iter().product::<usize>() != numel {
            return Err(Error::Checkpoint(format!("tensor {name}: shape {shape:?} disagrees with length {numel}")));
        }
        let bytes = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        let id = model.store.id(&name).ok_or_else(|| Error::Shape(format!("tensor {name} is not part of the model")))?;
        let p = model.store.get_mut(id);
        if p.tensor.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("tensor {name}: checkpoint shape {shape:?}, config shape {:?}", p.tensor.shape())));
        }
        for (dst, chunk) in p.tensor.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        p.frozen = frozen;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path, expect: Option<&ModelConfig>) -> Result<Model> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf, expect)
}
