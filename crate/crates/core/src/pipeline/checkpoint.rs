//! Named-tensor checkpoint container.
//!
//! Layout: the 8-byte magic `HSEGCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the UTF-8 JSON manifest,
//! then the tensor blob. The manifest holds the model configuration and one
//! record per tensor (name, shape, dtype, byte offset into the blob,
//! trainable flag); values are little-endian in the recorded dtype.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::init_params;
use crate::tensor::{DType, ParamStore, Scalar};

pub const MAGIC: &[u8; 8] = b"HSEGCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
}

pub fn encode_checkpoint<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for (name, entry) in params.iter() {
        tensors.push(TensorRecord {
            name: name.to_string(),
            shape: entry.value.shape().to_vec(),
            dtype: T::DTYPE,
            offset: blob.len(),
            trainable: entry.trainable,
        });
        for &v in entry.value.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = serde_json::to_vec(&Manifest { config: cfg.clone(), tensors })?;
    let mut out = Vec::with_capacity(20 + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], origin: &str) -> Result<(ModelConfig, ParamStore<T>)> {
    let corrupt = |reason: String| Error::CorruptFile { path: origin.to_string(), reason };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let manifest_end = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[20..manifest_end]).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let blob = &bytes[manifest_end..];

    let mut params = ParamStore::new();
    let mut expected_offset = 0;
    for rec in &manifest.tensors {
        if rec.dtype != T::DTYPE {
            return Err(corrupt(format!("tensor `{}` stored as {:?}, requested {:?}", rec.name, rec.dtype, T::DTYPE)));
        }
        let n: usize = rec.shape.iter().product();
        let size = rec.dtype.size_in_bytes();
        if rec.offset != expected_offset || rec.offset + n * size > blob.len() {
            return Err(corrupt(format!("tensor `{}` lies outside the blob", rec.name)));
        }
        let data: Vec<T> = blob[rec.offset..rec.offset + n * size].chunks_exact(size).map(T::read_le).collect();
        if rec.trainable {
            params.insert(&rec.name, data, &rec.shape)?;
        } else {
            params.insert_buffer(&rec.name, data, &rec.shape)?;
        }
        expected_offset = rec.offset + n * size;
    }
    if expected_offset != blob.len() {
        return Err(corrupt(format!("{} trailing bytes", blob.len() - expected_offset)));
    }
    manifest.config.validate()?;
    Ok((manifest.config, params))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, cfg: &ModelConfig, params: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(cfg, params)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelConfig, ParamStore<T>)> {
    decode_checkpoint(&fs::read(path)?, &path.display().to_string())
}

/// Checks that `params` has exactly the names and shapes `cfg` builds.
pub fn check_compatible<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>) -> Result<()> {
    let reference = init_params::<T>(cfg, 0)?;
    for (name, entry) in reference.iter() {
        let found = params
            .entry(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks parameter `{name}`")))?;
        if found.value.shape() != entry.value.shape() {
            return Err(Error::ConfigMismatch(format!(
                "parameter `{name}` has shape {:?}, configuration expects {:?}",
                found.value.shape(),
                entry.value.shape()
            )));
        }
    }
    if let Some(extra) = params.names().find(|n| !reference.contains(n)) {
        return Err(Error::ConfigMismatch(format!("checkpoint has unexpected parameter `{extra}`")));
    }
    Ok(())
}
