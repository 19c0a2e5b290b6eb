use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Conditioning vector shared by the text encoder, the image encoder and the
/// denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding(Vec<f64>);

const MAGIC: &[u8; 8] = b"DCEMB\0\0\x01";

impl TextEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding("must be non-empty and finite".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &TextEmbedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, other: &TextEmbedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn ensure_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: self.dim() });
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.0.len() as u64).to_le_bytes())?;
        for v in &self.0 {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        let mut len = [0u8; 8];
        let bad = |_| Error::BadCheckpoint("truncated embedding file".into());
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != MAGIC {
            return Err(Error::BadCheckpoint("not an embedding file".into()));
        }
        r.read_exact(&mut len).map_err(bad)?;
        let n = u64::from_le_bytes(len) as usize;
        if n == 0 || n > 1 << 24 {
            return Err(Error::BadCheckpoint(format!("implausible embedding length {n}")));
        }
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(bad)?;
            values.push(f64::from_le_bytes(buf));
        }
        Self::new(values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
