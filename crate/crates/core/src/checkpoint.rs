//! Binary checkpoints.
//!
//! All integers little-endian:
//!
//! ```text
//! "COMC" | version u32 | config_len u64 | config JSON
//!        | tensor_count u64 | tensor_count × (name_len u16, name, rank u8, dims u64 × rank, f32 × numel)
//! ```
//!
//! Tensors are written in name order, so equal parameter sets give equal bytes.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::modelzoo::{check_schema, ModelConfig};
use crate::numerics::Tensor;
use crate::params::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"COMC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized checkpoint bytes.
pub fn encode(params: &ParamSet, cfg: &ModelConfig) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(cfg)?;
    let mut out = Vec::with_capacity(64 + config.len() + 4 * params.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("tensor name `{name}` longer than 65535 bytes")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Contract(format!("tensor `{name}` has rank above 255")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Integrity(format!("truncated checkpoint while reading {what} at byte {}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes and checks the tensors against the embedded config.
pub fn decode(bytes: &[u8]) -> Result<(ParamSet, ModelConfig)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = r.u64("config length")? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(len, "config")?)?;
    let count = r.u64("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let n = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(r.take(n as usize, "name")?)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
            Error::Integrity(format!("tensor `{name}` has an overflowing shape {shape:?}"))
        })?;
        let raw = r.take(numel.saturating_mul(4), &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Integrity(format!("tensor `{name}`: {e}")))?;
        params.insert(name, t);
    }
    if r.at != bytes.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    check_schema(&params, &cfg)?;
    Ok((params, cfg))
}

/// Writes a checkpoint and returns the SHA-256 of its bytes.
pub fn save_checkpoint(params: &ParamSet, cfg: &ModelConfig, path: &Path) -> Result<String> {
    check_schema(params, cfg)?;
    let bytes = encode(params, cfg)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write then rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, ModelConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint that must match `expected`.
///
/// A tensor that is missing, extra or misshaped for `expected` is reported by name.
pub fn load_checkpoint_as(path: &Path, expected: &ModelConfig) -> Result<ParamSet> {
    let (params, _) = load_checkpoint(path)?;
    check_schema(&params, expected)?;
    Ok(params)
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}
