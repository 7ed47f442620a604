//! Model checkpoint container.
//!
//! Layout (little-endian): magic `RF3M`, `u32` version, `u32` config length,
//! UTF-8 JSON [`ModelConfig`], `u32` tensor count, then per tensor a `u32`
//! name length, the UTF-8 name, `u32` rank, `rank` x `u32` dims and the `f32` data.

use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RF3M";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)?;
    let mut out = Vec::with_capacity(16 + config.len() + 4 * model.store.num_scalars() + 64 * model.store.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    put_u32(&mut out, config.len());
    out.extend_from_slice(&config);
    put_u32(&mut out, model.store.len());
    for p in model.store.iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.tensor.rank());
        for &d in p.tensor.shape() {
            put_u32(&mut out, d);
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated checkpoint reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Rebuilds the architecture from the stored config and fills in every tensor by name.
pub fn load_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a model checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("config length")?;
    let at = r.pos;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::format(at, format!("config JSON: {e}")))?;
    let mut model = Model::<T>::new(config)?;
    let count = r.u32("tensor count")?;
    if count != model.store.len() {
        return Err(Error::invalid(format!(
            "checkpoint holds {count} tensors, architecture has {}",
            model.store.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let n = r.u32("name length")?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(n, "name")?).map_err(|_| Error::format(at, "tensor name is not UTF-8"))?;
        let rank = r.u32("rank")?;
        let dims = (0..rank).map(|_| r.u32("dim")).collect::<Result<Vec<_>>>()?;
        let id = model
            .store
            .find(name)
            .ok_or_else(|| Error::invalid(format!("unknown tensor {name}")))?;
        if model.store.get(id).shape() != dims.as_slice() {
            return Err(Error::invalid(format!(
                "tensor {name} has shape {dims:?}, expected {:?}",
                model.store.get(id).shape()
            )));
        }
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::invalid(format!("tensor {name} appears twice")));
        }
        let total: usize = dims.iter().product();
        let data = r.take(total * 4, "tensor data")?;
        for (dst, c) in model.store.get_mut(id).data_mut().iter_mut().zip(data.chunks_exact(4)) {
            *dst = T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after the last tensor"));
    }
    Ok(model)
}

pub fn write_checkpoint<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    std::fs::write(path, save_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes)
}
