//! `CTWS` weight files: a small versioned container of named f32 arrays.
//!
//! Layout (little-endian): magic `CTWS`, u32 version, u32 digest length +
//! digest bytes, u32 array count, then per array: u32 name length, UTF-8
//! name, u32 rank, u32 dims, f32 values.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::netcore::ParamStore;

pub const MAGIC: &[u8; 4] = b"CTWS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub digest: String,
    pub arrays: Vec<NamedArray>,
}

/// Hex SHA-256 of a canonical configuration string.
pub fn config_digest(canonical: &str) -> String {
    let hash = Sha256::digest(canonical.as_bytes());
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| Error::WeightFormat(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::WeightFormat("unexpected end of file".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::WeightFormat("name is not UTF-8".into()))
    }
}

impl WeightStore {
    /// Snapshot of every entry of `store`, buffers included.
    pub fn from_params(store: &ParamStore, digest: &str) -> Self {
        WeightStore {
            digest: digest.to_string(),
            arrays: store
                .iter()
                .map(|(_, e)| NamedArray {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    values: e.data.iter().map(|&v| v as f32).collect(),
                })
                .collect(),
        }
    }

    /// Copies values into a store built for the same configuration.
    /// Every stored array must exist there with the same shape.
    pub fn apply_to(&self, store: &mut ParamStore, expected_digest: &str) -> Result<()> {
        if self.digest != expected_digest {
            return Err(Error::WeightFormat(format!(
                "config digest mismatch: file {}, model {}",
                self.digest, expected_digest
            )));
        }
        for a in &self.arrays {
            let entry = store
                .get(&a.name)
                .ok_or_else(|| Error::WeightFormat(format!("unknown array `{}`", a.name)))?;
            if entry.shape != a.shape {
                return Err(Error::WeightFormat(format!(
                    "array `{}` has shape {:?}, model expects {:?}",
                    a.name, a.shape, entry.shape
                )));
            }
            store.set(&a.name, a.values.iter().map(|&v| f64::from(v)).collect())?;
        }
        Ok(())
    }

    /// Copies the arrays whose names start with `prefix`, ignoring the
    /// digest. Every store entry under `prefix` must be covered with the same
    /// shape, so the two architectures agree on that part.
    pub fn apply_prefix(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let wanted: Vec<(String, Vec<usize>)> = store
            .iter()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(_, e)| (e.name.clone(), e.shape.clone()))
            .collect();
        for (name, shape) in &wanted {
            let a = self
                .arrays
                .iter()
                .find(|a| &a.name == name)
                .ok_or_else(|| Error::WeightFormat(format!("missing array `{name}`")))?;
            if &a.shape != shape {
                return Err(Error::WeightFormat(format!(
                    "array `{name}` has shape {:?}, model expects {shape:?}",
                    a.shape
                )));
            }
            store.set(name, a.values.iter().map(|&v| f64::from(v)).collect())?;
        }
        Ok(wanted.len())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize)?;
        put_u32(&mut out, self.digest.len())?;
        out.extend_from_slice(self.digest.as_bytes());
        put_u32(&mut out, self.arrays.len())?;
        for a in &self.arrays {
            put_u32(&mut out, a.name.len())?;
            out.extend_from_slice(a.name.as_bytes());
            put_u32(&mut out, a.shape.len())?;
            for &d in &a.shape {
                put_u32(&mut out, d)?;
            }
            for v in &a.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut c = Cursor { data, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::WeightFormat("bad magic".into()));
        }
        let version = c.u32()?;
        if version != VERSION as usize {
            return Err(Error::WeightFormat(format!(
                "unsupported version {version}"
            )));
        }
        let digest = c.string()?;
        let count = c.u32()?;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = c.string()?;
            let rank = c.u32()?;
            let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::WeightFormat("shape overflow".into()))?;
            let raw = c.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::WeightFormat("shape overflow".into()))?,
            )?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            arrays.push(NamedArray {
                name,
                shape,
                values,
            });
        }
        if c.pos != data.len() {
            return Err(Error::WeightFormat("trailing bytes".into()));
        }
        Ok(WeightStore { digest, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).at(path)?;
        f.write_all(&bytes).at(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .at(path)?
            .read_to_end(&mut bytes)
            .at(path)?;
        Self::from_bytes(&bytes)
    }
}
