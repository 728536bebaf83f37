//! Named parameter sets and their on-disk form: a JSON manifest listing each
//! tensor's name, shape and element offset, next to one little-endian `f32`
//! payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::io::{container_paths, decode_f32, encode_f32, write_atomic};

const FORMAT: &str = "dirforge-params-1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name:?}")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Writes `<path>.json` and `<path>.bin` atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (manifest_path, payload_path) = container_paths(path);
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(self.entries.len());
        let mut payload = Vec::with_capacity(self.numel() * 4);
        for (name, t) in &self.entries {
            tensors.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            });
            offset += t.numel();
            payload.extend(encode_f32(t.data()));
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            tensors,
        };
        write_atomic(&payload_path, &payload)?;
        write_atomic(
            &manifest_path,
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest_path, payload_path) = container_paths(path);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown checkpoint format {:?}",
                manifest.format
            )));
        }
        let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::PayloadSize {
                expected: bytes.len() / 4 * 4,
                found: bytes.len(),
            });
        }
        let values = decode_f32(&bytes);
        let mut set = ParamSet::new();
        for e in manifest.tensors {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} shape {:?} disagrees with length {}",
                    e.name, e.shape, e.len
                )));
            }
            let end = e.offset.checked_add(e.len).filter(|&end| end <= values.len());
            let Some(end) = end else {
                return Err(Error::PayloadSize {
                    expected: (e.offset + e.len) * 4,
                    found: bytes.len(),
                });
            };
            let data = values[e.offset..end].to_vec();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(e.offset + i));
            }
            set.insert(e.name, Tensor::new(e.shape, data)?)?;
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::random_tensor;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamSet::new();
        p.insert("a.w", random_tensor(vec![3, 2, 3, 3, 3], 1)).unwrap();
        p.insert("a.b", Tensor::new(vec![3], vec![-0.0, f32::MIN_POSITIVE, 1e-30]).unwrap())
            .unwrap();
        let path = dir.path().join("ckpt");
        p.save(&path).unwrap();
        let q = ParamSet::load(&path).unwrap();
        assert_eq!(p.len(), q.len());
        for ((na, ta), (nb, tb)) in p.iter().zip(q.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamSet::new();
        p.insert("w", random_tensor(vec![10], 2)).unwrap();
        let path = dir.path().join("ckpt");
        p.save(&path).unwrap();
        let bin = dir.path().join("ckpt.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..20]).unwrap();
        assert!(matches!(ParamSet::load(&path), Err(Error::PayloadSize { .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(vec![1])).unwrap();
        assert!(p.insert("w", Tensor::zeros(vec![1])).is_err());
    }
}
