//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "BPFT"  u32 version  u64 blob_len  blob (JSON: config, vocab, calibrated)
//! u32 tensor_count
//! per tensor: u32 name_len  name  u32 rank  u64 dims[rank]  f32 payload
//! u64 FNV-1a of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"BPFT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Blob {
    config: ModelConfig,
    #[serde(default)]
    vocab: Vec<String>,
    #[serde(default)]
    calibrated: bool,
}

/// Decoded checkpoint before it is matched against a model schema.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub calibrated: bool,
    pub tensors: Vec<(String, Matrix)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn write_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let blob = serde_json::to_vec(&Blob {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        calibrated: model.calibrated,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "need {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| Error::Truncated(format!("{what} {n} exceeds address space")))
    }
}

/// Parses and checksums a checkpoint image.
pub fn read_checkpoint(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let blob_len = r.len("config length")?;
    let blob = r.take(blob_len, "config blob")?;
    let count = r.u32("tensor count")? as usize;
    let mut raw_tensors = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = r.take(name_len, "tensor name")?;
        let name =
            String::from_utf8(name.to_vec()).map_err(|_| Error::Data(format!("tensor {i}: name is not UTF-8")))?;
        let rank = r.u32("rank")? as usize;
        if rank != 2 {
            return Err(Error::Data(format!("tensor `{name}` has rank {rank}, expected 2")));
        }
        let rows = r.len("dimension")?;
        let cols = r.len("dimension")?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Truncated(format!("tensor `{name}` size overflows")))?;
        let payload = r.take(n, "tensor payload")?;
        raw_tensors.push((name, rows, cols, payload));
    }
    let body_end = r.pos;
    let stored = r.u64("checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    let computed = fnv1a(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let blob: Blob = serde_json::from_slice(blob)?;
    let tensors = raw_tensors
        .into_iter()
        .map(|(name, rows, cols, payload)| {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            Ok((name, Matrix::from_vec(rows, cols, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RawCheckpoint {
        config: blob.config,
        vocab: blob.vocab,
        calibrated: blob.calibrated,
        tensors,
    })
}

impl RawCheckpoint {
    /// Builds a model for `config` and fills every parameter by name.
    pub fn into_model(self, config: &ModelConfig) -> Result<Model> {
        let mut model = build_model(config)?;
        if let Some((_, w)) = self.tensors.iter().find(|(n, _)| n == "heads.cls.weight") {
            model.attach_classifier(w.rows(), config.seed)?;
        }
        let mut missing = Vec::new();
        for p in model.params.iter_mut() {
            match self.tensors.iter().find(|(n, _)| *n == p.name) {
                Some((_, m)) if m.shape() == p.value.shape() => p.value = m.clone(),
                Some((_, m)) => return Err(Error::dim("checkpoint tensor", m.shape(), p.value.shape())),
                None => missing.push(p.name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingTensors(missing));
        }
        model.vocab = self.vocab;
        model.calibrated = self.calibrated;
        Ok(model)
    }
}

fn read_file(path: &Path) -> Result<RawCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

/// Loads a checkpoint with the config stored inside it.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let raw = read_file(path.as_ref())?;
    let config = raw.config.clone();
    raw.into_model(&config)
}

/// Loads a checkpoint into the schema of `config`; tensors the schema
/// needs but the file lacks are reported together.
pub fn load_checkpoint_as(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Model> {
    read_file(path.as_ref())?.into_model(config)
}
