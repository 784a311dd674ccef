//! Named-tensor container with a little-endian binary file format.
//!
//! Layout: magic `GCKP`, version `u32`, tensor count `u32`, then per tensor
//! the name (`u32` byte length + UTF-8), rank `u32`, dims (`u64` each) and
//! the raw `f64` payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn put_scalar(&mut self, name: &str, v: f64) {
        self.insert(name, Tensor::scalar(v));
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.len() != 1 {
            return Err(Error::NotScalar(t.shape().to_vec()));
        }
        Ok(t.data()[0])
    }

    /// Text stored as a length-prefixed byte tensor.
    pub fn put_text(&mut self, name: &str, text: &str) {
        let mut data = Vec::with_capacity(text.len() + 1);
        data.push(text.len() as f64);
        data.extend(text.bytes().map(f64::from));
        self.insert(name, Tensor::vector(data));
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let data = self.get(name)?.data();
        let len = data[0] as usize;
        if data.len() != len + 1 {
            return Err(Error::Format(format!("`{name}` is not a text tensor")));
        }
        let bytes: Vec<u8> = data[1..].iter().map(|&b| b as u8).collect();
        String::from_utf8(bytes).map_err(|e| Error::Format(format!("`{name}`: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = read_bytes(&mut r, name_len)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            if n.checked_mul(8).map_or(true, |b| b > r.len()) {
                return Err(truncated(()));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(read_f64(&mut r)?);
            }
            ck.insert(name, Tensor::new(shape, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn truncated<E>(_: E) -> Error {
    Error::Format("unexpected end of file".into())
}

pub(crate) fn read_bytes(r: &mut &[u8], n: usize) -> Result<Vec<u8>> {
    if r.len() < n {
        return Err(truncated(()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head.to_vec())
}

pub(crate) fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f64::from_le_bytes(b))
}
