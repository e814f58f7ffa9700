//! Self-describing binary checkpoints.
//!
//! Layout: `b"LDMM"`, `u32` format version, `u64` metadata length, the JSON
//! metadata, then every tensor listed in the metadata as little-endian `f32`
//! values in listed order. All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LDMM";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("checkpoint is a {found} checkpoint, expected {expected}")]
    WrongStage { expected: Stage, found: Stage },
    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Hvq,
    Lavit,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Hvq => "hvq",
            Stage::Lavit => "lavit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub config: RunConfig,
    /// Last completed epoch count.
    pub epoch: usize,
    /// Training curves and other stage-specific numbers.
    pub metrics: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn new(stage: Stage, config: RunConfig, epoch: usize, metrics: serde_json::Value) -> Self {
        Self {
            meta: CheckpointMeta {
                stage,
                config,
                epoch,
                metrics,
                tensors: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.meta.tensors.push(TensorEntry {
            name: name.into(),
            shape,
        });
        self.data.push(values);
    }

    pub fn push_store(&mut self, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.push(name, t.shape().to_vec(), t.data().to_vec());
        }
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.meta
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| (self.meta.tensors[i].shape.as_slice(), self.data[i].as_slice()))
    }

    pub fn tensor(&self, name: &str) -> Result<&[f32], CheckpointError> {
        self.get(name)
            .map(|(_, d)| d)
            .ok_or_else(|| CheckpointError::MissingTensor(name.into()))
    }

    /// Overwrites every parameter of `store` with the same-named tensor.
    pub fn fill_store(&self, store: &mut ParamStore<f32>) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let (shape, data) = self
                .get(&name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            let expected = store.get(id).shape().to_vec();
            if shape != expected.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected,
                    found: shape.to_vec(),
                });
            }
            *store.get_mut(id) = Tensor::new(expected, data.to_vec()).expect("shape checked");
        }
        Ok(())
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<(), CheckpointError> {
        if self.meta.stage != stage {
            return Err(CheckpointError::WrongStage {
                expected: stage,
                found: self.meta.stage,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let meta = serde_json::to_vec(&self.meta)?;
        let numel: usize = self.data.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + meta.len() + 4 * numel);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for v in self.data.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated("header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated("header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let rest = &bytes[16..];
        if rest.len() < meta_len {
            return Err(CheckpointError::Truncated("metadata"));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&rest[..meta_len])?;
        let mut payload = &rest[meta_len..];
        let mut data = Vec::with_capacity(meta.tensors.len());
        for e in &meta.tensors {
            let n: usize = e.shape.iter().product();
            if payload.len() < 4 * n {
                return Err(CheckpointError::Truncated("payload"));
            }
            data.push(
                payload[..4 * n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
            payload = &payload[4 * n..];
        }
        if !payload.is_empty() {
            return Err(CheckpointError::Trailing(payload.len()));
        }
        Ok(Self { meta, data })
    }

    /// SHA-256 of the tensor payload only.
    pub fn payload_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.data.iter().flatten() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        crate::io::write_atomic(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(Stage::Hvq, RunConfig::default(), 3, serde_json::json!({"loss": [1.0, 0.5]}));
        c.push("a", vec![2, 2], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE]);
        c.push("b", vec![3], vec![0.1, 0.2, 0.3]);
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LDMM");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.payload_hash(), c.payload_hash());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated("payload"))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::Version { found: 2 })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::Trailing(1))));
    }

    #[test]
    fn fill_store_checks_names_and_shapes() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[2, 2]), true);
        sample().fill_store(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().1.data(), &[1.0, -2.0, 3.5, f32::MIN_POSITIVE]);
        let mut wrong = ParamStore::<f32>::new();
        wrong.add("b", Tensor::zeros(&[4]), true);
        assert!(matches!(sample().fill_store(&mut wrong), Err(CheckpointError::ShapeMismatch { .. })));
        let mut missing = ParamStore::<f32>::new();
        missing.add("c", Tensor::zeros(&[1]), true);
        assert!(matches!(sample().fill_store(&mut missing), Err(CheckpointError::MissingTensor(_))));
    }
}
