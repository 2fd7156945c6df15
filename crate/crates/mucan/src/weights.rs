//! Named tensor collection with bit-exact binary serialization.
//!
//! File format (all integers little-endian):
//! magic `MUCW`, u32 version = 1, u32 tensor count; then per tensor:
//! u16 name length, UTF-8 name bytes, u8 rank, u32 extents[rank],
//! extent-product f32 values row-major. Values are stored as 32-bit floats
//! regardless of the in-memory precision, so an f32 store round-trips
//! bit-exactly.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MUCW";
const VERSION: u32 = 1;

/// Ordered map from tensor name to tensor.
#[derive(Debug, Clone, Default)]
pub struct WeightStore<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> WeightStore<S> {
    pub fn new() -> Self {
        WeightStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate tensor name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::contract("too many tensors for the weights format"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, tensor) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::contract(format!("tensor name `{name}` too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(tensor.rank())
                .map_err(|_| Error::contract("tensor rank exceeds u8"))?;
            out.push(rank);
            for &e in tensor.shape() {
                let e = u32::try_from(e)
                    .map_err(|_| Error::contract("tensor extent exceeds u32"))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::WeightsFormat(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::WeightsFormat(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let count = r.u32()? as usize;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::WeightsFormat("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let raw = r.take(4)?;
                data.push(S::from_f64(
                    f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as f64,
                ));
            }
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::WeightsFormat(format!("tensor `{name}`: {e}")))?;
            store
                .insert(name, tensor)
                .map_err(|e| Error::WeightsFormat(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::WeightsFormat(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::WeightsFormat(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
