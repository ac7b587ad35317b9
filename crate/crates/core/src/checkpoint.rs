//! Named-tensor container used for checkpoints and dataset samples.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VVIT" | u32 version | u32 count
//! count x ( u32 name_len | name | u32 rank | rank x u32 dim | f32 payload )
//! u32 fingerprint_len | fingerprint
//! ```
//!
//! Payloads are always `f32` whatever the compute precision.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VVIT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<(String, Tensor<f32>)>,
    /// Hash of the run configuration that produced the file; empty for
    /// dataset samples.
    pub fingerprint: String,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.fingerprint.len() as u32).to_le_bytes());
        out.extend_from_slice(self.fingerprint.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| Error::Format(format!("tensor {i} name is not utf-8")))?;
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("`{name}` is too large")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload overflow".into()))?, &name)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("`{name}`: {e}")))?;
            tensors.push((name, t));
        }
        let len = r.u32("fingerprint length")? as usize;
        let fingerprint = String::from_utf8(r.take(len, "fingerprint")?.to_vec())
            .map_err(|_| Error::Format("fingerprint is not utf-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { tensors, fingerprint })
    }

    /// Writes through a temporary sibling and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated(format!("ended inside {what} at byte {}", self.bytes.len())));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Every parameter, in registration order.
pub fn to_tensor_file<T: Real>(store: &ParamStore<T>, fingerprint: &str) -> TensorFile {
    TensorFile {
        tensors: store.iter().map(|(_, p)| (p.name.clone(), p.tensor.cast())).collect(),
        fingerprint: fingerprint.to_string(),
    }
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: &Path, fingerprint: &str) -> Result<()> {
    to_tensor_file(store, fingerprint).write(path)
}

/// Loads into `store` all-or-nothing and returns the stored fingerprint.
pub fn load_checkpoint<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<String> {
    let file = TensorFile::read(path)?;
    let tensors: Vec<(String, Tensor<T>)> = file.tensors.into_iter().map(|(n, t)| (n, t.cast())).collect();
    store.assign_all(&tensors)?;
    Ok(file.fingerprint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn small() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.backbone.embed_dim = 16;
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (_, store) = Model::init::<f32>(&small(), 3).unwrap();
        save_checkpoint(&store, &path, "abc").unwrap();
        let (_, mut other) = Model::init::<f32>(&small(), 4).unwrap();
        assert_ne!(store.digest(None), other.digest(None));
        assert_eq!(load_checkpoint(&mut other, &path).unwrap(), "abc");
        for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }

    #[test]
    fn shape_mismatch_names_first_tensor_and_leaves_model_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (_, store) = Model::init::<f32>(&small(), 3).unwrap();
        save_checkpoint(&store, &path, "").unwrap();
        let mut cfg = small();
        cfg.backbone.embed_dim = 24;
        let (_, mut other) = Model::init::<f32>(&cfg, 3).unwrap();
        let before = other.digest(None);
        match load_checkpoint(&mut other, &path) {
            Err(Error::CheckpointShape { name, .. }) => assert_eq!(name, "backbone.patch_embed.weight"),
            r => panic!("{r:?}"),
        }
        assert_eq!(other.digest(None), before);
    }

    #[test]
    fn truncation_and_version_errors() {
        let (_, store) = Model::init::<f32>(&small(), 3).unwrap();
        let bytes = to_tensor_file(&store, "fp").encode();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(TensorFile::decode(&bytes[..cut]), Err(Error::Truncated(_))), "cut {cut}");
        }
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(TensorFile::decode(&v2), Err(Error::Version { found: 2, expected: 1 })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TensorFile::decode(&bad), Err(Error::Format(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.ckpt");
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let (_, mut other) = Model::init::<f32>(&small(), 9).unwrap();
        let before = other.digest(None);
        assert!(matches!(load_checkpoint(&mut other, &path), Err(Error::Truncated(_))));
        assert_eq!(other.digest(None), before);
    }

    #[test]
    fn header_layout() {
        let t = TensorFile {
            tensors: vec![("w".into(), Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap())],
            fingerprint: String::new(),
        };
        let b = t.encode();
        assert_eq!(&b[..4], b"VVIT");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(b[16], b'w');
        assert_eq!(&b[17..21], &1u32.to_le_bytes());
        assert_eq!(&b[21..25], &2u32.to_le_bytes());
        assert_eq!(&b[25..29], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 37);
        assert_eq!(TensorFile::decode(&b).unwrap(), t);
    }
}
