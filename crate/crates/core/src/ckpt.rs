//! Named-tensor container used for model checkpoints and resumable training
//! state.
//!
//! Layout (little-endian):
//! ```text
//! magic "TGCKPT\0\0" | version u32 | meta_len u32 | meta JSON
//! n_tensors u32 | { name_len u16 | name | ndim u8 | dims u32* | f32* }*
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::ByteReader;
use crate::model::{Encoder, ModelConfig, Params};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TGCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format("checkpoint", "tensor name is not utf-8"))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let bytes_len = shape
                .iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format("checkpoint", "tensor too large"))?;
            let raw = r.take(bytes_len)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)));
        }
        r.finish()?;
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Appends every tensor of `params` under `prefix`.
    pub fn push_params(&mut self, prefix: &str, params: &Params) {
        for (name, t) in params.tensors() {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    /// Fills a zero-initialized parameter set from tensors named `prefix + name`.
    pub fn take_params(&self, prefix: &str, cfg: &ModelConfig) -> Result<Params> {
        let mut params = Params::zeros(cfg);
        for (name, slot) in params.tensors_mut() {
            let full = format!("{prefix}{name}");
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == full)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {full}")))?;
            if t.shape != slot.shape {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {full} has shape {:?}, expected {:?}", t.shape, slot.shape),
                ));
            }
            slot.data.copy_from_slice(&t.data);
        }
        Ok(params)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: ModelConfig,
    vocab_hash: String,
}

pub fn encoder_to_container(enc: &Encoder) -> Container {
    let meta = ModelMeta {
        kind: "model".into(),
        config: enc.config.clone(),
        vocab_hash: enc.vocab_hash.clone(),
    };
    let mut c = Container {
        meta: serde_json::to_value(meta).expect("meta serializes"),
        tensors: Vec::new(),
    };
    c.push_params("", &enc.params);
    c
}

pub fn encoder_from_container(c: &Container) -> Result<Encoder> {
    let meta: ModelMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| Error::format("checkpoint", e.to_string()))?;
    if meta.kind != "model" {
        return Err(Error::format("checkpoint", format!("expected a model, found {}", meta.kind)));
    }
    meta.config.validate()?;
    let params = c.take_params("", &meta.config)?;
    Ok(Encoder::from_params(meta.config, params, meta.vocab_hash))
}

pub fn save_encoder(enc: &Encoder, path: &Path) -> Result<()> {
    encoder_to_container(enc).save(path)
}

pub fn load_encoder(path: &Path) -> Result<Encoder> {
    encoder_from_container(&Container::load(path)?)
}
