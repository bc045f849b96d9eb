//! Binary checkpoint format.
//!
//! ```text
//! header : version u64 | tensor_count u64
//! record : name_len u64 | name (UTF-8) | rank u64 | dims u64 × rank | f32 × numel
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const FORMAT_VERSION: u64 = 1;

/// Ordered list of named `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Snapshot of every parameter in `store`, names prefixed with `prefix`.
    pub fn push_store<T: Real>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            let mut t = t.cast::<f32>();
            t.set_requires_grad(false);
            self.push(format!("{prefix}{name}"), t);
        }
    }

    /// Restores every parameter of `store` from `{prefix}{name}` entries.
    pub fn load_store<T: Real>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", store.name(id));
            let src = self
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            let dst = store.get_mut(id);
            if dst.shape() != src.shape() {
                return Err(Error::Shape {
                    op: "load_store",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = T::of(s as f64);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let version = r.u64()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u64()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last record",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
