//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON header
//! (configuration, epoch, normalization, precision, array index), the arrays as
//! little-endian scalars in index order, and a SHA-256 digest of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Normalization;
use crate::diffarray::{DiffArray, ParamSet, RunningStats};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{BnStats, ModelConfig, ModelParams, SkeletonGraph};
use crate::scalar::{Precision, Scalar};

use super::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SKGRAPH\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    /// Training configuration; directory fields are not stored.
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub normalization: Normalization,
    pub state: ModelParams<S>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    normalization: Normalization,
    precision: Precision,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ArrayKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    kind: ArrayKind,
    shape: Vec<usize>,
}

fn precision_of<S: Scalar>() -> Precision {
    if S::BYTES == 8 {
        Precision::F64
    } else {
        Precision::F32
    }
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut body: Vec<u8> = Vec::new();
        let mut push = |name: &str, kind: ArrayKind, shape: Vec<usize>, data: &[S]| {
            arrays.push(ArrayEntry {
                name: name.to_string(),
                kind,
                shape,
            });
            for v in data {
                v.write_le(&mut body);
            }
        };
        for (name, p) in self.state.params.iter() {
            push(name, ArrayKind::Param, p.shape().to_vec(), p.data());
        }
        for (name, s) in &self.state.stats {
            push(name, ArrayKind::RunningMean, vec![s.mean.len()], &s.mean);
            push(name, ArrayKind::RunningVar, vec![s.var.len()], &s.var);
        }
        let mut config = self.config.clone();
        config.data_dir = None;
        config.checkpoint_dir = None;
        let header = Header {
            config,
            epoch: self.epoch,
            normalization: self.normalization,
            precision: precision_of::<S>(),
            arrays,
        };
        let json = serde_json::to_vec(&header).map_err(|e| ckpt_err(format!("encoding header: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + body.len() + DIGEST_LEN);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&body);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = split(bytes)?;
        let found = header.precision;
        if found != precision_of::<S>() {
            return Err(ckpt_err(format!(
                "checkpoint stores {} values, expected {}",
                found.name(),
                S::NAME
            )));
        }
        let mut params = ParamSet::new();
        let mut stats = BnStats::<S>::new();
        let mut offset = 0;
        for entry in &header.arrays {
            let n: usize = entry.shape.iter().product();
            let end = offset + n * S::BYTES;
            if end > body.len() {
                return Err(ckpt_err(format!("array `{}` extends past the data block", entry.name)));
            }
            let data: Vec<S> = body[offset..end].chunks_exact(S::BYTES).map(S::read_le).collect();
            offset = end;
            match entry.kind {
                ArrayKind::Param => params.insert(entry.name.clone(), DiffArray::new(entry.shape.clone(), data)?)?,
                ArrayKind::RunningMean => {
                    stats.entry(entry.name.clone()).or_insert_with(|| RunningStats::new(n)).mean = data;
                }
                ArrayKind::RunningVar => {
                    stats.entry(entry.name.clone()).or_insert_with(|| RunningStats::new(n)).var = data;
                }
            }
        }
        if offset != body.len() {
            return Err(ckpt_err(format!("{} unexpected trailing bytes", body.len() - offset)));
        }
        let ckpt = Self {
            config: header.config,
            epoch: header.epoch,
            normalization: header.normalization,
            state: ModelParams { params, stats },
        };
        SkeletonGraph::new(ckpt.config.model.clone())?.check_params(&ckpt.state)?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Errors unless `expected` describes the same network as the stored configuration.
    pub fn check_model(&self, expected: &ModelConfig) -> Result<()> {
        let stored = &self.config.model;
        if stored != expected {
            let a = serde_json::to_value(stored).unwrap_or_default();
            let b = serde_json::to_value(expected).unwrap_or_default();
            let diffs: Vec<String> = a
                .as_object()
                .into_iter()
                .flatten()
                .filter(|(k, v)| b.get(k.as_str()) != Some(v))
                .map(|(k, v)| format!("{k}: checkpoint {v}, requested {}", b.get(k.as_str()).unwrap_or(&serde_json::Value::Null)))
                .collect();
            return Err(Error::dim(format!("model configuration mismatch ({})", diffs.join("; "))));
        }
        Ok(())
    }
}

fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 + DIGEST_LEN {
        return Err(ckpt_err(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ckpt_err("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(format!(
            "format version {version} not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let (content, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(content).as_slice() != digest {
        return Err(ckpt_err("digest mismatch (truncated or corrupted file)"));
    }
    let header_len = u32::from_le_bytes(content[12..16].try_into().expect("4 bytes")) as usize;
    if 16 + header_len > content.len() {
        return Err(ckpt_err("header extends past end of file"));
    }
    let header: Header =
        serde_json::from_slice(&content[16..16 + header_len]).map_err(|e| ckpt_err(format!("header: {e}")))?;
    Ok((header, &content[16 + header_len..]))
}

/// A checkpoint in whichever precision it was saved.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, _) = split(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok(match header.precision {
            Precision::F32 => AnyCheckpoint::F32(Checkpoint::from_bytes(&bytes)?),
            Precision::F64 => AnyCheckpoint::F64(Checkpoint::from_bytes(&bytes)?),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        match self {
            AnyCheckpoint::F32(c) => &c.config,
            AnyCheckpoint::F64(c) => &c.config,
        }
    }
}
