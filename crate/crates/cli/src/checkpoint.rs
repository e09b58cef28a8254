//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"VQRF" | u32 version (=1) | u32 tensor count
//! per tensor: u32 name length | UTF-8 name | u32 ndim | ndim x u32 dims | f32 values
//! ```
//!
//! Tensors are written in name order, so equal parameter sets give equal
//! bytes. Values are stored as f32; loading widens them back to f64.

use std::collections::BTreeMap;
use std::path::Path;

use vqrefine::numkernel::Tensor;
use vqrefine::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VQRF";
pub const VERSION: u32 = 1;

/// Name of the tensor carrying the config hash.
pub const HASH_TENSOR: &str = "meta.config_hash";

pub fn encode<'a>(tensors: impl IntoIterator<Item = (String, &'a Tensor)>) -> Result<Vec<u8>> {
    let sorted: BTreeMap<String, &Tensor> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
    for (name, t) in sorted {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Domain(format!("tensor `{name}` holds a value that is not finite in f32")));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos,
            message: format!("truncated while reading {what}"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic, not a checkpoint".into() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let count = r.u32("tensor count")?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format { offset: at + 4, message: "tensor name is not UTF-8".into() })?
            .to_string();
        let ndim = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.u32("dims")? as usize);
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format {
            offset: at,
            message: format!("tensor `{name}` is too large"),
        })?;
        let raw = r.take(numel.saturating_mul(4), "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format { offset: at, message: e.to_string() })?;
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::Format { offset: at, message: format!("duplicate tensor `{name}`") });
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { offset: r.pos, message: format!("{} trailing bytes", bytes.len() - r.pos) });
    }
    Ok(map)
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Packs a hex SHA-256 into 16 exact f32 values (one u16 each).
pub fn hash_tensor(hex_hash: &str) -> Result<Tensor> {
    let bytes = hex::decode(hex_hash).map_err(|e| Error::Domain(format!("config hash: {e}")))?;
    if bytes.len() != 32 {
        return Err(Error::Domain("config hash must be 32 bytes".into()));
    }
    let data = bytes.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect();
    Tensor::new(vec![16], data)
}

pub fn hash_from_tensor(t: &Tensor) -> Result<String> {
    if t.dims() != [16] {
        return Err(Error::shape(format!("config hash tensor has dims {:?}", t.dims())));
    }
    let mut bytes = Vec::with_capacity(32);
    for &v in t.data() {
        if !(0.0..=65535.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::Domain(format!("config hash chunk {v} is not a u16")));
        }
        bytes.extend_from_slice(&(v as u16).to_be_bytes());
    }
    Ok(hex::encode(bytes))
}

/// Splits off the config hash, returning it with the remaining tensors.
pub fn take_hash(mut map: BTreeMap<String, Tensor>) -> Result<(Option<String>, BTreeMap<String, Tensor>)> {
    let hash = map.remove(HASH_TENSOR).map(|t| hash_from_tensor(&t)).transpose()?;
    Ok((hash, map))
}
