//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic   "SFL1"
//! version u32 (= 1)
//! count   u32
//! count x { name_len u16, name (UTF-8), ndim u8, dims u32 x ndim, payload f32 x prod(dims) }
//! ```
//!
//! Values are stored as `f32`, so a round trip reproduces dims exactly and
//! values up to `f64 -> f32` rounding.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::NamedTensorSpace;
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{Tensor, MAX_AXES};

pub const MAGIC: [u8; 4] = *b"SFL1";
pub const VERSION: u32 = 1;

pub fn write_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let tensors: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    let count = u32::try_from(tensors.len()).map_err(|_| CheckpointError::TooLarge(format!("{} tensors", tensors.len())))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| CheckpointError::TooLarge(format!("name `{name}`")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| CheckpointError::TooLarge(format!("axis of `{name}`")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.reserve(4 * t.numel());
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn read_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let count = r.u32("tensor count")?;
    let mut out: Vec<(String, Tensor)> = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::BadName)?
            .to_owned();
        let ndim = r.take(1, "rank")?[0] as usize;
        let mut raw = Vec::with_capacity(ndim.min(MAX_AXES));
        for _ in 0..ndim {
            raw.push(r.u32("dims")?);
        }
        let bad = || CheckpointError::BadDims {
            name: name.clone(),
            dims: raw.clone(),
        };
        if ndim == 0 || ndim > MAX_AXES || raw.contains(&0) {
            return Err(bad().into());
        }
        let numel = raw
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| {
                if raw.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize)).is_none() {
                    bad()
                } else {
                    CheckpointError::Truncated("payload")
                }
            })?;
        let payload = r.take(4 * numel, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::Duplicate(name).into());
        }
        let dims = raw.iter().map(|&d| d as usize).collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Trailing(r.remaining()).into());
    }
    Ok(out)
}

pub fn encode(space: &NamedTensorSpace) -> Result<Vec<u8>> {
    write_tensors(space.iter())
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensorSpace> {
    let mut space = NamedTensorSpace::new();
    for (name, t) in read_tensors(bytes)? {
        space.insert(name, t);
    }
    Ok(space)
}

pub fn save_checkpoint(space: &NamedTensorSpace, path: &Path) -> Result<()> {
    let bytes = encode(space)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NamedTensorSpace> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Hex prefix of the SHA-256 of the tensor's stored (`f32`) payload.
pub fn tensor_checksum(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for &v in t.data() {
        h.update((v as f32).to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}
