//! Binary checkpoint format shared by the LM and NMT trainers.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "BMT1" | version u32 | meta_len u64 | meta UTF-8 (key=value lines)
//! | param_count u64 | { name_len u64 | name | ndims u32 | dims u32...
//!                     | f32 payload } ...
//! ```
//!
//! Parameters are written in sorted name order and payloads are raw f32
//! bits, so identical stores serialize to identical bytes and a save/load
//! round trip reproduces forward passes exactly.

use crate::error::{Error, Result};
use crate::numcore::ParamStore;
use ndarray::Array2;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"BMT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    /// (name, values), sorted by name.
    pub params: Vec<(String, Array2<f32>)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, metadata: BTreeMap<String, String>) -> Self {
        let params = store
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        Checkpoint { metadata, params }
    }

    /// Rebuild a parameter store; optimizer state starts fresh.
    pub fn to_store(&self, frozen: bool) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (name, value) in &self.params {
            store.insert(name.clone(), value.clone());
        }
        if frozen {
            store.freeze_all();
        }
        store
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("metadata key {key} has a malformed value")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, value) in &self.params {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (rows, cols) = value.dim();
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(rows as u32).to_le_bytes());
            out.extend_from_slice(&(cols as u32).to_le_bytes());
            for v in value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let meta_len = r.u64()? as usize;
        let meta_bytes = r.take(meta_len)?;
        let meta_text = std::str::from_utf8(meta_bytes)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta_text.lines() {
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Checkpoint(format!("malformed metadata line {line:?}")));
            };
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = r.u64()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let ndims = r.u32()?;
            if ndims != 2 {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has {ndims} dims, expected 2"
                )));
            }
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                values.push(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")));
            }
            let array = Array2::from_shape_vec((rows, cols), values)
                .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
            params.push((name, array));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after parameter table".into()));
        }
        Ok(Checkpoint { metadata, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Fail unless the checkpoint was written against a vocab with this hash.
    pub fn require_vocab_hash(&self, key: &str, hash: &str) -> Result<()> {
        let stored = self.meta(key)?;
        if stored != hash {
            return Err(Error::Checkpoint(format!(
                "vocab hash mismatch: checkpoint has {stored}, current vocab is {hash}"
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> Checkpoint {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.insert("b.weight", array![[1.5, -2.25], [0.0, 3.125]]);
        store.insert("a.bias", array![[0.5, 0.25, -0.125]]);
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "lm".to_string());
        meta.insert("steps".to_string(), "120".to_string());
        meta.insert("vocab_hash".to_string(), "abc123".to_string());
        Checkpoint::from_store(&store, meta)
    }

    #[test]
    fn byte_roundtrip_is_exact() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.metadata, ckpt.metadata);
        assert_eq!(back.params.len(), ckpt.params.len());
        for ((n1, v1), (n2, v2)) in back.params.iter().zip(&ckpt.params) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2); // bit-exact f32
        }
        // deterministic serialization
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn file_roundtrip_preserves_store_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bmt");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(
            ckpt.to_store(false).fingerprint(),
            loaded.to_store(false).fingerprint()
        );
    }

    #[test]
    fn params_are_sorted_by_name() {
        let ckpt = sample();
        assert_eq!(ckpt.params[0].0, "a.bias");
        assert_eq!(ckpt.params[1].0, "b.weight");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn vocab_hash_gate() {
        let ckpt = sample();
        assert!(ckpt.require_vocab_hash("vocab_hash", "abc123").is_ok());
        let err = ckpt.require_vocab_hash("vocab_hash", "zzz").unwrap_err();
        assert!(err.to_string().contains("mismatch"));
    }

    #[test]
    fn frozen_store_flag() {
        let ckpt = sample();
        let store = ckpt.to_store(true);
        assert!(store.iter().all(|p| p.frozen));
    }
}
