use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, Result};

const MAGIC: &[u8; 4] = b"WWA1";

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named `f32` tensors in the `WWA1` layout: magic, u64 LE header length,
/// JSON header `{"tensors":[{"name","shape","offset"}]}`, raw LE values.
/// Offsets are bytes from the start of the value section.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightArchive {
    pub tensors: Vec<ArchiveTensor>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderEntry>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Archive(msg.into())
}

impl WeightArchive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            entries.push(HeaderEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
            });
            offset += t.data.len() * 4;
        }
        let header = serde_json::to_vec(&Header { tensors: entries }).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing WWA1 magic"));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = &bytes[12..];
        if len > body.len() {
            return Err(bad(format!("header length {len} exceeds file size")));
        }
        let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("malformed header: {e}")))?;
        let data = &body[len..];
        let mut seen = HashMap::new();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if seen.insert(e.name.clone(), ()).is_some() {
                return Err(bad(format!("duplicate tensor `{}`", e.name)));
            }
            let n: usize = e.shape.iter().product();
            let end = n.checked_mul(4).and_then(|b| b.checked_add(e.offset));
            let Some(end) = end.filter(|&end| end <= data.len()) else {
                return Err(bad(format!("tensor `{}` extends past the end of the file", e.name)));
            };
            let values = data[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(ArchiveTensor {
                name: e.name,
                shape: e.shape,
                data: values,
            });
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Parameters in store order, then `<bn>.running_mean` / `<bn>.running_var`.
    pub fn from_model(model: &Model) -> Self {
        let store = model.store();
        let mut tensors: Vec<ArchiveTensor> = store
            .param_names()
            .iter()
            .zip(store.params())
            .map(|(name, t)| ArchiveTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        for (name, s) in store.stat_names().iter().zip(store.stats()) {
            for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                tensors.push(ArchiveTensor {
                    name: format!("{name}.{suffix}"),
                    shape: vec![values.len()],
                    data: values.clone(),
                });
            }
        }
        Self { tensors }
    }

    /// Builds `cfg` and fills it from the archive. Every expected tensor must
    /// be present with the expected shape and nothing else may be present.
    pub fn into_model(self, cfg: &ModelConfig) -> Result<Model> {
        let mut model = Model::build(cfg, 0)?;
        let mut by_name: HashMap<String, ArchiveTensor> =
            self.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let t = by_name
                .remove(name)
                .ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            if t.shape != shape {
                return Err(bad(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            Ok(t.data)
        };
        let store = model.store_mut();
        let names = store.param_names().to_vec();
        for (name, p) in names.iter().zip(store.params_mut()) {
            let shape = p.shape().to_vec();
            p.data_mut().copy_from_slice(&take(name, &shape)?);
        }
        let stat_names = store.stat_names().to_vec();
        for name in &stat_names {
            let s = store.stats_mut(name).expect("name from store");
            let c = s.channels();
            s.mean = take(&format!("{name}.running_mean"), &[c])?;
            s.var = take(&format!("{name}.running_var"), &[c])?;
            s.initialized = true;
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(bad(format!("unexpected tensor `{extra}`")));
        }
        Ok(model)
    }
}

pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    WeightArchive::from_model(model).write(path)
}

pub fn load_weights(path: &Path, cfg: &ModelConfig) -> Result<Model> {
    WeightArchive::read(path)?.into_model(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;

    fn small() -> ModelConfig {
        ModelConfig::from_arch("res2net50-ii".parse::<Arch>().unwrap())
    }

    #[test]
    fn header_layout() {
        let a = WeightArchive {
            tensors: vec![ArchiveTensor {
                name: "w".into(),
                shape: vec![2],
                data: vec![1.0, -2.5],
            }],
        };
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], b"WWA1");
        let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        assert_eq!(header["tensors"][0]["offset"], 0);
        assert_eq!(
            &bytes[12 + len..],
            [1.0f32.to_le_bytes(), (-2.5f32).to_le_bytes()].concat()
        );
        assert_eq!(WeightArchive::from_bytes(&bytes).unwrap(), a);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let bytes = WeightArchive::from_model(&Model::build(&small(), 1).unwrap()).to_bytes();
        assert!(WeightArchive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(WeightArchive::from_bytes(&wrong).is_err());
    }

    #[test]
    fn mismatch_names_first_offender() {
        let mut a = WeightArchive::from_model(&Model::build(&small(), 1).unwrap());
        a.tensors[3].shape = vec![999];
        let name = a.tensors[3].name.clone();
        let msg = a.into_model(&small()).unwrap_err().to_string();
        assert!(msg.contains(&name), "{msg}");

        let mut a = WeightArchive::from_model(&Model::build(&small(), 1).unwrap());
        a.tensors.push(ArchiveTensor {
            name: "stray".into(),
            shape: vec![1],
            data: vec![0.0],
        });
        assert!(a.into_model(&small()).unwrap_err().to_string().contains("stray"));

        let other = ModelConfig::from_arch("se-res2net50-ii".parse::<Arch>().unwrap());
        let a = WeightArchive::from_model(&Model::build(&small(), 1).unwrap());
        assert!(a.into_model(&other).is_err());
    }
}
