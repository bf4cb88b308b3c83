//! Binary checkpoint format.
//!
//! ```text
//! magic    "SCSM v1\n"                       8 bytes
//! dims     vocab_size, dim, layers, langs    4 × u32 LE
//! tensors  f32 LE in EncoderParams::tensors order
//! checksum SHA-256 of dims + tensors         32 bytes
//! ```
//!
//! The checksum doubles as the model fingerprint recorded in indexes.

use std::path::{Path, PathBuf};

use thiserror::Error;

use super::params::{EncoderConfig, EncoderParams};
use crate::corpus::Language;
use crate::io_util::{sha256, write_atomic, Digest32, Reader};

const MAGIC: &[u8; 8] = b"SCSM v1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    Format,
    #[error("checkpoint is truncated or corrupted")]
    Corrupted,
    #[error("checkpoint dims {found:?} do not match configured {expected:?}")]
    DimsMismatch { expected: [u32; 4], found: [u32; 4] },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn dims_of(config: &EncoderConfig) -> [u32; 4] {
    [config.vocab_size as u32, config.dim as u32, config.layers as u32, Language::ALL.len() as u32]
}

fn payload(params: &EncoderParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.num_values());
    for v in dims_of(params.config()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in params.tensors() {
        for &x in t {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

/// Checksum of the serialized parameters; identical to the trailing
/// checksum of the checkpoint file.
pub fn fingerprint(params: &EncoderParams) -> Digest32 {
    sha256(&payload(params))
}

pub fn write_checkpoint(params: &EncoderParams) -> Vec<u8> {
    let body = payload(params);
    let mut out = Vec::with_capacity(MAGIC.len() + body.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&sha256(&body));
    out
}

/// Parses a checkpoint. With `expected` set, the dims record must match it;
/// the nonlinearity is always taken from `expected` when given.
pub fn read_checkpoint(bytes: &[u8], expected: Option<&EncoderConfig>) -> Result<EncoderParams, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::Format);
    }
    if bytes.len() < MAGIC.len() + 16 + 32 {
        return Err(CheckpointError::Corrupted);
    }
    let (body, checksum) = bytes[MAGIC.len()..].split_at(bytes.len() - MAGIC.len() - 32);
    if sha256(body) != checksum {
        return Err(CheckpointError::Corrupted);
    }
    let mut r = Reader::new(body);
    let mut found = [0u32; 4];
    for slot in &mut found {
        *slot = r.u32().ok_or(CheckpointError::Corrupted)?;
    }
    let mut config = EncoderConfig::new(found[0] as usize, found[1] as usize, found[2] as usize);
    if let Some(exp) = expected {
        let want = dims_of(exp);
        if want != found {
            return Err(CheckpointError::DimsMismatch { expected: want, found });
        }
        config.nonlinearity = exp.nonlinearity;
    }
    if found[3] as usize != Language::ALL.len() {
        return Err(CheckpointError::Corrupted);
    }
    let mut params = EncoderParams::zeros(config);
    if r.remaining() != 4 * params.num_values() {
        return Err(CheckpointError::Corrupted);
    }
    for t in params.tensors_mut() {
        for x in t.iter_mut() {
            *x = r.f32().ok_or(CheckpointError::Corrupted)? as f64;
        }
    }
    Ok(params)
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &write_checkpoint(params)).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path, expected: Option<&EncoderConfig>) -> Result<EncoderParams, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    read_checkpoint(&bytes, expected)
}
