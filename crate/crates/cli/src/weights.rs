//! The `VADW` weights format.
//!
//! Layout, all integers little-endian u32 unless noted:
//! magic `VADW`, version, entry count, then per entry sorted by name:
//! name length, UTF-8 name, dtype tag (u8, 0 = f32, 1 = f64), rank,
//! dims, raw little-endian payload.

use std::collections::BTreeMap;
use std::path::Path;

use vit_adapter_core::nn::ParamStore;
use vit_adapter_core::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"VADW";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum WeightsError {
    #[error("not a weights file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported weights version {0} (expected {VERSION})")]
    Version(u32),
    #[error("weights file truncated while reading {0}")]
    Truncated(String),
    #[error("shape mismatch for `{name}`: model has {expected:?}, file has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("dtype mismatch for `{name}`: model is {expected:?}, file is {found:?}")]
    DTypeMismatch {
        name: String,
        expected: DType,
        found: DType,
    },
    #[error("entry `{0}` is missing from the file")]
    Missing(String),
    #[error("entry `{0}` does not exist in the model")]
    Unexpected(String),
    #[error("malformed entry: {0}")]
    Malformed(String),
    #[error("{0} trailing bytes after the last entry")]
    Trailing(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = WeightsError> = std::result::Result<T, E>;

/// One decoded entry; `payload` is kept as raw bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.size());
        t.data().iter().for_each(|v| v.write_le(&mut payload));
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            dims: t.dims().to_vec(),
            payload,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(WeightsError::DTypeMismatch {
                name: self.name.clone(),
                expected: T::DTYPE,
                found: self.dtype,
            });
        }
        let data = self
            .payload
            .chunks_exact(T::DTYPE.size())
            .map(T::read_le)
            .collect();
        Tensor::new(&self.dims, data)
            .map_err(|e| WeightsError::Malformed(format!("{}: {e}", self.name)))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| WeightsError::Malformed(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes entries in name order. Names must be unique.
pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut sorted: BTreeMap<&str, &Entry> = BTreeMap::new();
    for e in entries {
        if sorted.insert(&e.name, e).is_some() {
            return Err(WeightsError::Malformed(format!(
                "duplicate entry `{}`",
                e.name
            )));
        }
        if e.payload.len() != e.dtype.size() * e.dims.iter().product::<usize>() {
            return Err(WeightsError::Malformed(format!(
                "payload of `{}` does not match its dims",
                e.name
            )));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, sorted.len())?;
    for (name, e) in sorted {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        out.push(e.dtype.tag());
        put_u32(&mut out, e.dims.len())?;
        for &d in &e.dims {
            put_u32(&mut out, d)?;
        }
        out.extend_from_slice(&e.payload);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| WeightsError::Truncated(what.into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(WeightsError::BadMagic([
            magic[0], magic[1], magic[2], magic[3],
        ]));
    }
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(WeightsError::Version(version));
    }
    let count = r.u32("entry count")?;
    let mut entries: Vec<Entry> = Vec::new();
    for i in 0..count {
        let len = r.u32(&format!("name length of entry {i}"))?;
        let name = std::str::from_utf8(r.take(len, &format!("name of entry {i}"))?)
            .map_err(|_| WeightsError::Malformed(format!("name of entry {i} is not UTF-8")))?
            .to_string();
        if let Some(prev) = entries.last() {
            if prev.name >= name {
                return Err(WeightsError::Malformed(format!(
                    "entries not sorted at `{name}`"
                )));
            }
        }
        let tag = r.take(1, &format!("dtype of `{name}`"))?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| WeightsError::Malformed(format!("dtype tag {tag} of `{name}`")))?;
        let rank = r.u32(&format!("rank of `{name}`"))?;
        let dims = (0..rank)
            .map(|_| r.u32(&format!("dims of `{name}`")))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| WeightsError::Malformed(format!("dims of `{name}` overflow")))?;
        let payload = r.take(n, &format!("payload of `{name}`"))?.to_vec();
        entries.push(Entry {
            name,
            dtype,
            dims,
            payload,
        });
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::Trailing(bytes.len() - r.pos));
    }
    Ok(entries)
}

pub fn store_entries<T: Real>(store: &ParamStore<T>) -> Vec<Entry> {
    store
        .iter()
        .map(|(_, p)| Entry::from_tensor(&p.name, &p.value))
        .collect()
}

pub fn encode_store<T: Real>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    encode(&store_entries(store))
}

/// Overwrites every parameter of `store` from `bytes`. The file must hold
/// exactly the model's entries with matching dtype and shape; on error the
/// store is left untouched.
pub fn decode_into<T: Real>(store: &mut ParamStore<T>, bytes: &[u8]) -> Result<()> {
    let mut by_name: BTreeMap<String, Entry> = decode(bytes)?
        .into_iter()
        .map(|e| (e.name.clone(), e))
        .collect();
    let mut updates = Vec::with_capacity(store.len());
    for (id, p) in store.iter() {
        let e = by_name
            .remove(&p.name)
            .ok_or_else(|| WeightsError::Missing(p.name.clone()))?;
        if e.dims != p.value.dims() {
            return Err(WeightsError::ShapeMismatch {
                name: p.name.clone(),
                expected: p.value.dims().to_vec(),
                found: e.dims,
            });
        }
        updates.push((id, e.to_tensor::<T>()?));
    }
    if let Some(name) = by_name.into_keys().next() {
        return Err(WeightsError::Unexpected(name));
    }
    for (id, t) in updates {
        store
            .set(id, t)
            .map_err(|e| WeightsError::Malformed(e.to_string()))?;
    }
    Ok(())
}

pub fn save_weights<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, encode_store(store)?)?)
}

pub fn load_weights<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    decode_into(store, &std::fs::read(path)?)
}
