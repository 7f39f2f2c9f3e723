//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "RCBT" | version: u32 | header_len: u32 | header: UTF-8 JSON
//! tensor_count: u32
//! per tensor: name_len: u32 | name | rank: u32 | dims: rank × u32 | values: f32 × ∏dims
//! ```
//!
//! The JSON header carries the encoder config and the vocabulary hash.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_model, EncoderConfig, EncoderError, Model};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RCBT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    vocab_hash: u64,
}

pub fn write_checkpoint(model: &Model, vocab_hash: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        vocab_hash,
    })
    .expect("header serializes");
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let tensors = model.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses a checkpoint; returns the model and its recorded vocabulary hash.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(Model, u64), EncoderError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(EncoderError::BadMagic);
    }
    let version = r.u32().ok_or(EncoderError::BadMagic)?;
    if version != CHECKPOINT_VERSION {
        return Err(EncoderError::VersionUnsupported(version));
    }
    let header_err = || EncoderError::CorruptTensor("<header>".into());
    let len = r.u32().ok_or_else(header_err)? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len).ok_or_else(header_err)?).map_err(|_| header_err())?;
    header.config.validate()?;

    let mut model = init_model(&header.config, 0)?;
    let mut tensors = model.params.tensors_mut();
    let count = r.u32().ok_or_else(header_err)? as usize;
    if count != tensors.len() {
        return Err(header_err());
    }
    for (expected_name, t) in tensors.iter_mut() {
        let corrupt = || EncoderError::CorruptTensor(expected_name.clone());
        let name_len = r.u32().ok_or_else(corrupt)? as usize;
        let name = r.take(name_len).ok_or_else(corrupt)?;
        if name != expected_name.as_bytes() {
            return Err(corrupt());
        }
        let rank = r.u32().ok_or_else(corrupt)? as usize;
        if rank != t.ndim() {
            return Err(corrupt());
        }
        for &d in t.shape().to_vec().iter() {
            if r.u32().ok_or_else(corrupt)? as usize != d {
                return Err(corrupt());
            }
        }
        let raw = r.take(t.len() * 4).ok_or_else(corrupt)?;
        for (dst, chunk) in t.iter_mut().zip(raw.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(corrupt());
            }
            *dst = f64::from(v);
        }
    }
    drop(tensors);
    if r.pos != bytes.len() {
        return Err(EncoderError::CorruptTensor("<trailing bytes>".into()));
    }
    Ok((model, header.vocab_hash))
}

pub fn checkpoint_save(model: &Model, vocab_hash: u64, path: &Path) -> Result<(), EncoderError> {
    std::fs::write(path, write_checkpoint(model, vocab_hash))?;
    Ok(())
}

/// Loads a checkpoint, rejecting it when `expected_vocab_hash` is given and
/// differs from the recorded one.
pub fn checkpoint_load(
    path: &Path,
    expected_vocab_hash: Option<u64>,
) -> Result<(Model, u64), EncoderError> {
    let (model, hash) = read_checkpoint(&std::fs::read(path)?)?;
    if let Some(expected) = expected_vocab_hash {
        if expected != hash {
            return Err(EncoderError::VocabMismatch {
                expected,
                found: hash,
            });
        }
    }
    Ok((model, hash))
}
