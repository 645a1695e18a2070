//! Flat `key → tensor` containers and their on-disk forms.
//!
//! Two formats are read: safetensors (the native checkpoint container, which
//! also carries a string metadata map) and PyTorch `.pth` zip archives (the
//! form published backbone weights ship in). Only safetensors is written.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn insert(&mut self, key: String, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(key, t)
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.tensors.get(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<Tensor> {
        self.tensors.remove(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.tensors.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Entries whose key starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParameterStore {
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn with_prefix(&self, prefix: &str) -> ParameterStore {
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParameterStore) {
        self.tensors.extend(other.tensors);
    }

    /// Loads by extension: `.safetensors`, or `.pth` / `.pt` / `.bin` as PyTorch.
    pub fn load(path: &Path) -> Result<ParameterStore> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("safetensors") => Ok(Self::load_safetensors(path)?.0),
            Some("pth") | Some("pt") | Some("bin") => Self::load_pth(path),
            other => Err(Error::Config(format!(
                "unrecognised parameter file extension {other:?} for {}",
                path.display()
            ))),
        }
    }

    /// PyTorch checkpoint; a nested `state_dict` entry is used when present.
    pub fn load_pth(path: &Path) -> Result<ParameterStore> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
        let entries = candle_core::pickle::read_all_with_key(path, Some("state_dict"))
            .or_else(|_| candle_core::pickle::read_all(path))
            .map_err(|e| Error::Load {
                key: path.display().to_string(),
                reason: e.to_string(),
            })?;
        let mut store = ParameterStore::default();
        for (k, t) in entries {
            store.insert(k.strip_prefix("module.").unwrap_or(&k).to_string(), t);
        }
        Ok(store)
    }

    pub fn load_safetensors(path: &Path) -> Result<(ParameterStore, HashMap<String, String>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_safetensors_bytes(&bytes).map_err(|reason| Error::Integrity {
            path: path.to_path_buf(),
            reason,
        })
    }

    fn from_safetensors_bytes(bytes: &[u8]) -> std::result::Result<(ParameterStore, HashMap<String, String>), String> {
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| e.to_string())?;
        let metadata = meta.metadata().clone().unwrap_or_default();
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu).map_err(|e| e.to_string())?;
        Ok((
            ParameterStore {
                tensors: tensors.into_iter().collect(),
            },
            metadata,
        ))
    }

    pub fn save_safetensors(&self, path: &Path, metadata: HashMap<String, String>) -> Result<()> {
        let contiguous: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.contiguous()?)))
            .collect::<Result<_>>()?;
        let mut bytes = safetensors::serialize(contiguous.iter().map(|(k, v)| (k.as_str(), v)), Some(metadata))
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
        canonicalize_header(&mut bytes).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over keys, dtypes, shapes and raw values, in key order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            h.update(t.dtype().as_str().as_bytes());
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let flat = t.flatten_all()?;
            match t.dtype() {
                DType::F32 => {
                    for v in flat.to_vec1::<f32>()? {
                        h.update(v.to_le_bytes());
                    }
                }
                _ => {
                    for v in flat.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }
}

impl FromIterator<(String, Tensor)> for ParameterStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParameterStore {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Rewrites the JSON header of a serialized safetensors buffer with sorted
/// keys. The metadata map is a `HashMap`, so without this the same tensors
/// could be written with differently ordered headers from run to run. The
/// header keeps its padded length, so tensor offsets are unchanged.
fn canonicalize_header(bytes: &mut [u8]) -> std::result::Result<(), String> {
    let len = u64::from_le_bytes(bytes[..8].try_into().map_err(|_| "truncated header")?) as usize;
    let header = bytes.get_mut(8..8 + len).ok_or("truncated header")?;
    let value: serde_json::Value = serde_json::from_slice(header).map_err(|e| e.to_string())?;
    // serde_json's default map is ordered by key
    let sorted = serde_json::to_vec(&value).map_err(|e| e.to_string())?;
    if sorted.len() > len {
        return Err("canonical header is longer than the original".into());
    }
    header[..sorted.len()].copy_from_slice(&sorted);
    header[sorted.len()..].fill(b' ');
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn safetensors_round_trip_with_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        let mut s = ParameterStore::default();
        s.insert(
            "a.weight".into(),
            Tensor::new(&[[1f32, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap(),
        );
        let meta = HashMap::from([("k".to_string(), "v".to_string())]);
        s.save_safetensors(&path, meta).unwrap();
        let (back, meta) = ParameterStore::load_safetensors(&path).unwrap();
        assert_eq!(meta["k"], "v");
        assert_eq!(back.checksum().unwrap(), s.checksum().unwrap());
    }

    #[test]
    fn saved_bytes_do_not_depend_on_metadata_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParameterStore::default();
        s.insert("b".into(), Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap());
        s.insert("a".into(), Tensor::new(&[3f64], &Device::Cpu).unwrap());
        let saves: Vec<Vec<u8>> = (0..6)
            .map(|i| {
                // a fresh map (and hasher) each time
                let meta: HashMap<String, String> = (0..12).map(|k| (format!("key{k}"), k.to_string())).collect();
                let path = dir.path().join(format!("{i}.safetensors"));
                s.save_safetensors(&path, meta).unwrap();
                std::fs::read(&path).unwrap()
            })
            .collect();
        assert!(saves.windows(2).all(|w| w[0] == w[1]));
        let (_, meta) = ParameterStore::load_safetensors(&dir.path().join("0.safetensors")).unwrap();
        assert_eq!(meta["key11"], "11");
    }

    #[test]
    fn truncated_file_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        let mut s = ParameterStore::default();
        s.insert("w".into(), Tensor::zeros((64, 64), DType::F32, &Device::Cpu).unwrap());
        s.save_safetensors(&path, HashMap::new()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            ParameterStore::load_safetensors(&path),
            Err(Error::Integrity { .. })
        ));
    }

    #[test]
    fn checksum_sees_value_changes() {
        let mut a = ParameterStore::default();
        a.insert("w".into(), Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap());
        let mut b = a.clone();
        b.insert("w".into(), Tensor::new(&[1f32, 2.5], &Device::Cpu).unwrap());
        assert_ne!(a.checksum().unwrap(), b.checksum().unwrap());
    }
}
