//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `DFSCKPT1`, a little-endian `u32` manifest
//! length, the UTF-8 JSON manifest, then every tensor as contiguous
//! little-endian `f64`. Manifest tensor offsets and lengths are in bytes,
//! relative to the start of the blob section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Model, ModelConfig, ParamKey};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DFSCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run metadata (e.g. how to regenerate the data).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

pub fn encode(model: &Model, meta: Option<serde_json::Value>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for key in model.param_keys() {
        let t = model.param(key).expect("key from model");
        tensors.push(TensorEntry {
            name: key.name(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            len: t.len() * 8,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        config: model.config.clone(),
        tensors,
        meta,
    })?;
    let mut out = Vec::with_capacity(12 + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Model, Manifest)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if hlen > body.len() {
        return Err(Error::Format(format!(
            "manifest length {hlen} exceeds remaining {} bytes",
            body.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let blob = &body[hlen..];
    let declared: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if declared != blob.len() {
        return Err(Error::Format(format!(
            "manifest declares {declared} blob bytes, file has {}",
            blob.len()
        )));
    }
    manifest
        .config
        .validate()
        .map_err(|e| Error::Format(format!("manifest config: {e}")))?;

    // shapes come from the config; values from the blob
    let mut model = Model::build(manifest.config.clone(), &mut RngStream::new(0))?;
    let keys = model.param_keys();
    if keys.len() != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "config implies {} tensors, manifest lists {}",
            keys.len(),
            manifest.tensors.len()
        )));
    }
    for (key, entry) in keys.into_iter().zip(&manifest.tensors) {
        let slot = model.param_mut(key).expect("key from model");
        if entry.name != key.name() || entry.shape != slot.shape() {
            return Err(Error::Format(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                key.name(),
                slot.shape()
            )));
        }
        let count: usize = entry.shape.iter().product();
        if entry.len != count * 8 || entry.offset + entry.len > blob.len() {
            return Err(Error::Format(format!("tensor {} has bad extent", entry.name)));
        }
        let data = blob[entry.offset..entry.offset + entry.len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *slot = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok((model, manifest))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    save_checkpoint_with(model, None, path)
}

pub fn save_checkpoint_with(model: &Model, meta: Option<serde_json::Value>, path: &Path) -> Result<()> {
    fs::write(path, encode(model, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Ok(decode(&fs::read(path)?)?.0)
}

pub fn load_checkpoint_with_manifest(path: &Path) -> Result<(Model, Manifest)> {
    decode(&fs::read(path)?)
}

/// Name → key lookup for checkpoint tensor names.
pub fn key_for_name(model: &Model, name: &str) -> Option<ParamKey> {
    model.param_keys().into_iter().find(|k| k.name() == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Mode;

    fn sample() -> Model {
        let mut cfg = ModelConfig::uniform(3, 6, 2, 3, 0.3, Mode::Dfs);
        cfg.bias = true;
        cfg.seed = 9;
        let mut m = Model::build(cfg, &mut RngStream::new(4)).unwrap();
        m.layers[1].bias = Some(Tensor::row(vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.0, 0.5]));
        m
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.config, m.config);
        for key in m.param_keys() {
            assert!(back.param(key).unwrap().bitwise_eq(m.param(key).unwrap()), "{}", key.name());
        }
        assert_eq!(back.layers[0].split, m.layers[0].split);
    }

    #[test]
    fn meta_survives() {
        let meta = serde_json::json!({"data": {"kind": "spirals"}});
        let bytes = encode(&sample(), Some(meta.clone())).unwrap();
        assert_eq!(decode(&bytes).unwrap().1.meta, Some(meta));
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode(&sample(), None).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode(b"DFS"), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_or_padded_blob() {
        let bytes = encode(&sample(), None).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 8]), Err(Error::Format(_))));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 8]);
        assert!(matches!(decode(&longer), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..20]), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_against_config() {
        let m = sample();
        let bytes = encode(&m, None).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut manifest: Manifest = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        manifest.config.widths[0] = 5;
        let h = serde_json::to_vec(&manifest).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&bytes[12 + hlen..]);
        assert!(matches!(decode(&out), Err(Error::Format(_))));
    }
}
