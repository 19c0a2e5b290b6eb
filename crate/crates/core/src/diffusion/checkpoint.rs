//! Single-file binary checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian `u64` header length, the JSON
//! header (version tag, backend name, backend config, schedule, shape table),
//! the tensors as little-endian `f64` in table order, and finally the SHA-256
//! of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ScheduleConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DCCKPT\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self { name: name.into(), shape }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub backend: String,
    pub config: serde_json::Value,
    pub schedule: ScheduleConfig,
    pub tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint: header plus one flat buffer per shape-table entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub header: CheckpointHeader,
    pub tensors: Vec<Vec<f64>>,
}

impl CheckpointFile {
    pub fn tensor(&self, name: &str) -> Result<&[f64]> {
        self.header
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| self.tensors[i].as_slice())
            .ok_or_else(|| Error::BadCheckpoint(format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.header.tensors.len() != self.tensors.len() {
            return Err(Error::BadCheckpoint("shape table and tensor list differ in length".into()));
        }
        for (entry, data) in self.header.tensors.iter().zip(&self.tensors) {
            if entry.len() != data.len() {
                return Err(Error::BadCheckpoint(format!(
                    "tensor {:?}: table says {} values, got {}",
                    entry.name,
                    entry.len(),
                    data.len()
                )));
            }
        }
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.tensors.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * payload + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::BadCheckpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::ChecksumMismatch);
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize.checked_add(hlen).filter(|&e| e <= body.len());
        let header_end = header_end.ok_or_else(|| Error::BadCheckpoint("header length out of range".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[16..header_end])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::BadCheckpoint(format!("unsupported checkpoint version {}", header.version)));
        }
        let mut rest = &body[header_end..];
        let total: usize = header.tensors.iter().map(TensorEntry::len).sum();
        if rest.len() != 8 * total {
            return Err(Error::BadCheckpoint(format!("payload has {} bytes, shape table needs {}", rest.len(), 8 * total)));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let (chunk, tail) = rest.split_at(8 * entry.len());
            tensors.push(chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect());
            rest = tail;
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Backends that can round-trip their full state through a checkpoint.
pub trait Checkpoint: Sized {
    fn to_checkpoint(&self) -> CheckpointFile;
    fn from_checkpoint(file: CheckpointFile) -> Result<Self>;
}

/// Writes `backend` to `path`.
pub fn snapshot_backend<B: Checkpoint>(backend: &B, path: impl AsRef<Path>) -> Result<()> {
    backend.to_checkpoint().save(path)
}

/// Reads a backend back from a file written by [`snapshot_backend`].
pub fn restore_backend<B: Checkpoint>(path: impl AsRef<Path>) -> Result<B> {
    B::from_checkpoint(CheckpointFile::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CheckpointFile {
        CheckpointFile {
            header: CheckpointHeader {
                version: FORMAT_VERSION,
                backend: "test".into(),
                config: serde_json::json!({"width": 3}),
                schedule: ScheduleConfig::default(),
                tensors: vec![TensorEntry::new("a", vec![2, 3]), TensorEntry::new("b", vec![1])],
            },
            tensors: vec![vec![0.1, -0.2, 1e-300, 4.0, 5.5, f64::MAX], vec![7.25]],
        }
    }

    #[test]
    fn bytes_roundtrip() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = CheckpointFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.tensor("b").unwrap(), &[7.25]);
        assert!(back.tensor("c").is_err());
    }

    #[test]
    fn corrupted_header_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[20] ^= 0x01;
        assert!(matches!(CheckpointFile::from_bytes(&bytes), Err(Error::ChecksumMismatch)));
        let last = bytes.len() - 1;
        bytes[20] ^= 0x01;
        bytes[last] ^= 0x80;
        assert!(matches!(CheckpointFile::from_bytes(&bytes), Err(Error::ChecksumMismatch)));
    }

    #[test]
    fn mismatched_table_is_rejected() {
        let mut ck = sample();
        ck.tensors[1].push(1.0);
        assert!(matches!(ck.to_bytes(), Err(Error::BadCheckpoint(_))));
    }
}
