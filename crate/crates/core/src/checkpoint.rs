//! Versioned binary archive of named `f64` arrays plus a JSON manifest.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, the
//! manifest, then every array's values (little endian) in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{M2ganError, Result};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"M2GANCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    key: String,
    shape: Shape,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// In-memory archive contents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub arrays: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, arrays: BTreeMap::new() }
    }

    /// Add every entry of `store` under `prefix/`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.arrays.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Collect every array under `prefix/` into a store.
    pub fn take_store(&self, prefix: &str) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        let p = format!("{prefix}/");
        for (key, t) in self.arrays.range(p.clone()..) {
            let Some(name) = key.strip_prefix(&p) else { break };
            out.insert(name, t.clone())?;
        }
        Ok(out)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.arrays.range(p.clone()..).next().is_some_and(|(k, _)| k.starts_with(&p))
    }

    pub fn require(&self, key: &str) -> Result<&Tensor> {
        self.arrays.get(key).ok_or_else(|| M2ganError::Archive(format!("missing array {key:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|(k, t)| ArrayEntry { key: k.clone(), shape: t.shape() }).collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let total: usize = self.arrays.values().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.arrays.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| M2ganError::Archive("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(M2ganError::Archive("not a checkpoint archive".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| M2ganError::Archive("truncated header".into()))?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(M2ganError::Version { found: version, expected: FORMAT_VERSION });
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| M2ganError::Archive("truncated header".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(M2ganError::Archive("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let mut arrays = BTreeMap::new();
        for e in manifest.arrays {
            let n = e.shape.numel();
            if r.len() < 8 * n {
                return Err(M2ganError::Archive(format!("truncated data for {:?}", e.key)));
            }
            let data =
                r[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            r = &r[8 * n..];
            arrays.insert(e.key, Tensor::from_vec(e.shape, data)?);
        }
        if !r.is_empty() {
            return Err(M2ganError::Archive(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { meta: manifest.meta, arrays })
    }

    /// Write to a temporary sibling, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| crate::plane::ingestion(path, e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

/// Pack a value vector as an `[len, 1, 1, 1]` array.
pub fn vector(values: &[f64]) -> Tensor {
    Tensor::from_vec(Shape::new(values.len(), 1, 1, 1), values.to_vec()).expect("vector shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new(serde_json::json!({"epoch": 3}));
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.1, -2.5, f64::MIN_POSITIVE]).unwrap()).unwrap();
        s.insert("b", Tensor::zeros(Shape::new(1, 2, 1, 1))).unwrap();
        a.put_store("gen", &s);
        a.arrays.insert("genx/other".into(), vector(&[1.0]));
        a
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let a = sample();
        a.save(&path).unwrap();
        let b = Archive::load(&path).unwrap();
        assert_eq!(a, b);
        let store = b.take_store("gen").unwrap();
        assert_eq!(store.len(), 2);
        assert!(b.has_prefix("genx") && !b.has_prefix("ge"));
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = Archive::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, M2ganError::Version { found: 7, expected: FORMAT_VERSION }));
        let text = err.to_string();
        assert!(text.contains('7') && text.contains(&FORMAT_VERSION.to_string()));
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Archive::from_bytes(b"not an archive at all").is_err());
    }
}
