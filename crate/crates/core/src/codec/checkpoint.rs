//! Binary checkpoint: magic, format version, a length-prefixed JSON header
//! (model config, training stage, tensor names and shapes), then raw
//! little-endian `f32` parameter data in header order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::model::CodecModel;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SGWMCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    stage: u8,
    tensors: Vec<TensorEntry>,
}

impl CodecModel {
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            config: self.config().clone(),
            stage: self.stage(),
            tensors: self
                .store_parts()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(MAGIC)?;
        write(&VERSION.to_le_bytes())?;
        write(&(json.len() as u64).to_le_bytes())?;
        write(&json)?;
        for (_, t) in self.store_parts() {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            write(&bytes)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!(
                "format version {version}, this build reads version {VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut model = CodecModel::new(header.config, 0)
            .map_err(|e| bad(&format!("invalid model config: {e}")))?;
        model.set_stage(header.stage).map_err(|e| bad(&e.to_string()))?;
        if header.tensors.len() != model.store().len() {
            return Err(bad(&format!(
                "{} tensors stored, model has {}",
                header.tensors.len(),
                model.store().len()
            )));
        }
        let mut offset = 20 + hlen;
        let ids: Vec<_> = model.store().ids().collect();
        for (entry, id) in header.tensors.iter().zip(ids) {
            let t = model.store_mut().get_mut(id);
            if entry.shape != t.shape() {
                return Err(bad(&format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            let n = t.len() * 4;
            let raw = bytes.get(offset..offset + n).ok_or_else(|| bad("truncated data"))?;
            for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            offset += n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after parameter data"));
        }
        if !model.store().all_finite() {
            return Err(bad("non-finite parameters"));
        }
        Ok(model)
    }

    /// Loads and checks that the stored configuration equals `expected`.
    pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        let model = Self::load_checkpoint(path)?;
        let got = model.config();
        if got.n_bits != expected.n_bits {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint carries {} bits, expected {}",
                path.display(),
                got.n_bits,
                expected.n_bits
            )));
        }
        if got != expected {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint model config differs from the requested one",
                path.display()
            )));
        }
        Ok(model)
    }
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
