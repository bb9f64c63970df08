//! `Q4DG` tensor container shared by checkpoints, datasets and prediction dumps.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "Q4DG" | version: u32 | count: u32 |
//!   count × ( name_len: u32 | name: utf-8 | ndim: u32 | dims: ndim × u64 | data: Π dims × f64 )
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"Q4DG";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(records: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                reason: format!("truncated while reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

/// Parses a container. `path` is only used in error messages.
pub fn decode(buf: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = match std::str::from_utf8(r.take(name_len, "name")?) {
            Ok(s) => s.to_string(),
            Err(_) => return Err(r.corrupt("record name is not utf-8")),
        };
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(r.u64("dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.corrupt("dimension product overflows"))?;
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| r.corrupt("payload size overflows"))?;
        let raw = r.take(bytes, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(r.corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(records)
}

pub fn write_tensors(path: &Path, records: &[(&str, &Tensor)]) -> Result<()> {
    fs::write(path, encode(records)).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf, path)
}

/// Reads a container expected to hold exactly one record named `name`.
pub fn read_single(path: &Path, name: &str) -> Result<Tensor> {
    let mut recs = read_tensors(path)?;
    match recs.pop() {
        Some((n, t)) if recs.is_empty() && n == name => Ok(t),
        _ => Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("expected a single record `{name}`"),
        }),
    }
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let records: Vec<(&str, &Tensor)> = store.iter().collect();
    write_tensors(path, &records)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, t) in read_tensors(path)? {
        store.add(name, t);
    }
    Ok(store)
}
