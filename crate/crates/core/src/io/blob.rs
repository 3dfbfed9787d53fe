//! `LRTB` tensor blobs.
//!
//! ```text
//! magic   4 bytes  "LRTB"
//! version u32 LE   currently 1
//! rank    u32 LE
//! dims    rank × u32 LE
//! payload product(dims) × f32 LE, row-major
//! ```
//!
//! A file may hold several blobs back to back (sample bundles do).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LRTB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorBlob {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {expected} values, got {}",
                data.len()
            )));
        }
        Ok(TensorBlob { dims, data })
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.reserve(4 * self.data.len());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn format(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.format(format!("truncated header: missing {what}")))?;
        self.pos += 4;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn blob(&mut self) -> Result<TensorBlob> {
        if self.bytes.get(self.pos..self.pos + 4) != Some(MAGIC.as_slice()) {
            return Err(self.format("missing LRTB magic"));
        }
        self.pos += 4;
        let version = self.u32("version")?;
        if version > VERSION {
            return Err(Error::Version {
                path: self.path.to_path_buf(),
                found: version,
                supported: VERSION,
            });
        }
        if version == 0 {
            return Err(self.format("version 0 is invalid"));
        }
        let rank = self.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| self.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let expected: usize = dims.iter().product();
        let available = (self.bytes.len() - self.pos) / 4;
        if available < expected {
            return Err(Error::LengthMismatch {
                path: self.path.to_path_buf(),
                expected,
                actual: available,
            });
        }
        let end = self.pos + 4 * expected;
        let data = self.bytes[self.pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        self.pos = end;
        Ok(TensorBlob { dims, data })
    }
}

/// Decodes every blob in `bytes`; `path` is only used in error messages.
pub fn decode_all(bytes: &[u8], path: &Path) -> Result<Vec<TensorBlob>> {
    let mut r = Reader { bytes, pos: 0, path };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        out.push(r.blob()?);
    }
    if out.is_empty() {
        return Err(r.format("file holds no tensor"));
    }
    Ok(out)
}

/// Reads a file holding exactly one blob.
pub fn read_blob(path: &Path) -> Result<TensorBlob> {
    let bytes = read_bytes(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let blob = r.blob()?;
    if r.pos != bytes.len() {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected: blob.data.len(),
            actual: blob.data.len() + (bytes.len() - r.pos) / 4,
        });
    }
    Ok(blob)
}

pub fn read_blobs(path: &Path) -> Result<Vec<TensorBlob>> {
    decode_all(&read_bytes(path)?, path)
}

pub fn write_blob(path: &Path, blob: &TensorBlob) -> Result<()> {
    write_blobs(path, std::slice::from_ref(blob))
}

pub fn write_blobs(path: &Path, blobs: &[TensorBlob]) -> Result<()> {
    let mut bytes = Vec::new();
    for b in blobs {
        b.encode_into(&mut bytes);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingBlob {
                path: path.to_path_buf(),
            }
        } else {
            Error::io(path, e)
        }
    })
}
