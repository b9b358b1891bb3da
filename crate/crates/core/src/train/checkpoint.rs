//! `<name>.cadnet` files: 8 magic bytes, a little-endian u64 header length,
//! a UTF-8 JSON manifest, then every tensor as little-endian f32 in manifest
//! order. Momentum buffers are stored as `momentum/<param>`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::CadNet;

pub const CHECKPOINT_EXTENSION: &str = "cadnet";
const MAGIC: &[u8; 8] = b"CADNETv1";
const FORMAT: &str = "cadnet-checkpoint";
const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    float: Option<String>,
    endianness: Option<String>,
    epoch: usize,
    config: TrainConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in bytes.
    offset: usize,
    /// Number of f32 values.
    len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub tensors: Vec<NamedTensor>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Copies parameters and momentum buffers out of `model`.
    pub fn capture(model: &CadNet, config: &TrainConfig, epoch: usize) -> Self {
        let params = model.params();
        let mut tensors: Vec<NamedTensor> = params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape().to_vec(),
                data: p.data(),
            })
            .collect();
        tensors.extend(params.iter().map(|p| NamedTensor {
            name: format!("{MOMENTUM_PREFIX}{}", p.name),
            shape: p.shape().to_vec(),
            data: p.velocity.clone(),
        }));
        Self {
            config: config.clone(),
            epoch,
            tensors,
        }
    }

    /// Writes values and momentum into `model`, which must have exactly the
    /// checkpoint's parameter names and shapes.
    pub fn restore_into(&self, model: &mut CadNet) -> Result<()> {
        let find = |name: &str| self.tensors.iter().find(|t| t.name == name);
        let mut expected = 0;
        for p in model.params() {
            let t = find(&p.name).ok_or_else(|| err(format!("parameter `{}` missing from checkpoint", p.name)))?;
            if t.shape != p.shape() {
                return Err(err(format!(
                    "parameter `{}` has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    t.shape,
                    p.shape()
                )));
            }
            let m = find(&format!("{MOMENTUM_PREFIX}{}", p.name))
                .ok_or_else(|| err(format!("momentum for `{}` missing from checkpoint", p.name)))?;
            if m.shape != t.shape {
                return Err(err(format!("momentum for `{}` has shape {:?}", p.name, m.shape)));
            }
            expected += 2;
        }
        if expected != self.tensors.len() {
            let known: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
            let extra = self
                .tensors
                .iter()
                .map(|t| t.name.strip_prefix(MOMENTUM_PREFIX).unwrap_or(&t.name))
                .find(|n| !known.iter().any(|k| k == n))
                .unwrap_or("?");
            return Err(err(format!("checkpoint has parameter `{extra}` the model lacks")));
        }
        for p in model.params_mut() {
            let value = find(&p.name).expect("checked above");
            let momentum = find(&format!("{MOMENTUM_PREFIX}{}", p.name)).expect("checked above");
            p.set_data(&value.data);
            p.velocity.copy_from_slice(&momentum.data);
        }
        Ok(())
    }

    /// Builds the model described by the stored configuration and loads the
    /// weights into it.
    pub fn build_model(&self) -> Result<CadNet> {
        let mut model = CadNet::new(self.config.arch.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            entries.push(Entry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
                len: t.data.len(),
            });
            offset += 4 * t.data.len();
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            float: Some("f32".into()),
            endianness: Some("little".into()),
            epoch: self.epoch,
            config: self.config.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&manifest).map_err(|e| err(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("not a cadnet checkpoint (bad magic)"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header = bytes
            .get(16..16usize.saturating_add(header_len))
            .ok_or_else(|| err("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(header).map_err(|e| err(format!("invalid manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(err(format!(
                "unsupported format {} version {}",
                manifest.format, manifest.version
            )));
        }
        match manifest.endianness.as_deref() {
            Some("little") => {}
            Some(other) => return Err(err(format!("unsupported endianness `{other}`"))),
            None => return Err(err("manifest has no endianness marker")),
        }
        if manifest.float.as_deref() != Some("f32") {
            return Err(err(format!("unsupported float width {:?}", manifest.float)));
        }
        let blob = &bytes[16 + header_len..];
        if blob.is_empty() {
            return Err(err("empty parameter blob"));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected_end = 0;
        for e in manifest.tensors {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(err(format!("tensor `{}`: shape {:?} does not hold {} values", e.name, e.shape, e.len)));
            }
            let end = e.offset + 4 * e.len;
            let raw = blob
                .get(e.offset..end)
                .ok_or_else(|| err(format!("truncated blob: tensor `{}` ends past the file", e.name)))?;
            expected_end = expected_end.max(end);
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        if expected_end != blob.len() {
            return Err(err(format!(
                "blob has {} bytes but the manifest describes {expected_end}",
                blob.len()
            )));
        }
        Ok(Self {
            config: manifest.config,
            epoch: manifest.epoch,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => err(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
