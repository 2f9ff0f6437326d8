//! Binary checkpoint container: named f64 tensors with a trailing CRC32.
//!
//! Layout (little-endian): magic `TADP`, version u32, tensor count u32, then
//! per tensor `name_len u32, name bytes, rank u32, extents u64 x rank,
//! payload f64 x numel`, and finally CRC32 over every preceding byte.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"TADP";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn save(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &e in &t.shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        let numel: usize = t.shape.iter().product();
        debug_assert_eq!(numel, t.data.len());
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.display().to_string(),
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.display().to_string(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: bytes.len() as u64,
            msg: "truncated before checksum".into(),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: (bytes.len() - 4) as u64,
            msg: format!("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"),
        });
    }
    let mut cur = Cursor {
        bytes: body,
        pos: 0,
        path,
    };
    if cur.take(4, "magic")? != MAGIC {
        return Err(cur.err("bad magic"));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(cur.err(format!("unsupported version {version}")));
    }
    let count = cur.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = String::from_utf8(cur.take(name_len, "name")?.to_vec())
            .map_err(|_| cur.err("name is not UTF-8"))?;
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8, "payload")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    if cur.pos != body.len() {
        return Err(cur.err("trailing bytes after last tensor"));
    }
    Ok(tensors)
}
