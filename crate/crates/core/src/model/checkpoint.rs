//! Checkpoint container: `b"FCKP"`, version `u32`, manifest length `u64`,
//! JSON manifest, then the concatenated tensor encodings.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{serialize, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"FCKP";
pub const VERSION: u32 = 1;

/// Training state carried alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub best_val_acc: Option<f64>,
    #[serde(default)]
    pub best_epoch: Option<usize>,
    #[serde(default)]
    pub optimizer_step: u64,
    /// Free-form settings of whoever wrote the file (e.g. the trainer).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Byte offset into the blob section.
    pub offset: u64,
    pub len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    fingerprint: String,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    /// Model parameters first, in registration order, then any extra state.
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Element> Checkpoint<T> {
    pub fn from_model(model: &Model<T>, meta: CheckpointMeta, extra: Vec<(String, Tensor<T>)>) -> Self {
        let mut tensors: Vec<_> = model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        tensors.extend(extra);
        Self { config: model.config.clone(), meta, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = blobs.len() as u64;
            serialize::encode_into(t, &mut blobs);
            entries.push(TensorEntry { name: name.clone(), offset, len: blobs.len() as u64 - offset });
        }
        let manifest = Manifest {
            config: self.config.clone(),
            fingerprint: self.config.fingerprint(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (missing FCKP magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Format("checkpoint manifest truncated".into()))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        if manifest.config.fingerprint() != manifest.fingerprint {
            return Err(Error::Format("config fingerprint mismatch".into()));
        }
        let blobs = &bytes[16 + len..];
        let tensors = manifest
            .tensors
            .into_iter()
            .map(|e| {
                let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
                let slice = blobs
                    .get(start..end)
                    .ok_or_else(|| Error::Format(format!("tensor `{}` truncated", e.name)))?;
                let (t, used) = serialize::decode::<T>(slice)?;
                if used != slice.len() {
                    return Err(Error::Format(format!("tensor `{}` length mismatch", e.name)));
                }
                Ok((e.name, t))
            })
            .collect::<Result<_>>()?;
        Ok(Self { config: manifest.config, meta: manifest.meta, tensors })
    }

    /// Writes through a temporary file and a rename, so readers never see a
    /// half-written checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model described by the checkpoint and restores its weights.
    pub fn to_model(&self) -> Result<Model<T>> {
        let mut model = build_model(&self.config, 0)?;
        model.load_params(|name| self.get(name))?;
        Ok(model)
    }

    /// Restores weights into an existing model with the same configuration.
    pub fn load_into(&self, model: &mut Model<T>) -> Result<()> {
        if model.config.fingerprint() != self.config.fingerprint() {
            return Err(Error::config("checkpoint", "model configuration differs from the checkpoint's"));
        }
        model.load_params(|name| self.get(name))
    }
}
