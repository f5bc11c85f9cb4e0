//! Self-describing, checksummed checkpoint container.
//!
//! Layout: 8-byte magic, `u32` schema version, `u64` header length, JSON
//! header, raw little-endian tensor data, SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ETSCKPT1";
pub const SCHEMA_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    arch_id: String,
    iteration: u64,
    config: serde_json::Value,
    counters: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub arch_id: String,
    pub iteration: u64,
    pub config: serde_json::Value,
    /// Named scalar counters such as optimizer step counts.
    pub counters: BTreeMap<String, u64>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn decode(entry: &TensorEntry, bytes: &[u8]) -> Result<Tensor> {
    let numel: usize = entry.shape.iter().product();
    let t = match entry.dtype.as_str() {
        "f32" if bytes.len() == numel * 4 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
        }
        "f64" if bytes.len() == numel * 8 => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
        }
        _ => {
            return Err(Error::Checkpoint(format!(
                "bad tensor record `{}`",
                entry.name
            )))
        }
    };
    Ok(t)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = encode(t)?;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dtype_name(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
                offset: data.len(),
                len: bytes.len(),
            });
            data.extend_from_slice(&bytes);
        }
        let header = serde_json::to_vec(&Header {
            arch_id: self.arch_id.clone(),
            iteration: self.iteration,
            config: self.config.clone(),
            counters: self.counters.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + header.len() + data.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let min = MAGIC.len() + 12 + DIGEST_LEN;
        if bytes.len() < min {
            return Err(Error::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        if &body[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: version,
                expected: SCHEMA_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let data_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Checkpoint("header length out of range".into()))?;
        let header: Header = serde_json::from_slice(&body[20..data_start])?;
        let data = &body[data_start..];
        let mut tensors = BTreeMap::new();
        for entry in &header.tensors {
            let end = entry
                .offset
                .checked_add(entry.len)
                .filter(|&e| e <= data.len())
                .ok_or_else(|| {
                    Error::Checkpoint(format!("tensor `{}` out of range", entry.name))
                })?;
            tensors.insert(entry.name.clone(), decode(entry, &data[entry.offset..end])?);
        }
        Ok(Self {
            arch_id: header.arch_id,
            iteration: header.iteration,
            config: header.config,
            counters: header.counters,
            tensors,
        })
    }

    /// Writes through a temporary file so a failed write never leaves a
    /// partial checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(Error::io(path))?)
    }

    /// Fails unless the stored architecture id equals `expected`.
    pub fn expect_arch(&self, expected: &str) -> Result<()> {
        if self.arch_id == expected {
            Ok(())
        } else {
            Err(Error::Architecture {
                found: self.arch_id.clone(),
                expected: expected.to_string(),
            })
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> std::collections::HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| {
                n.strip_prefix(prefix)
                    .map(|rest| (rest.to_string(), t.clone()))
            })
            .collect()
    }
}
