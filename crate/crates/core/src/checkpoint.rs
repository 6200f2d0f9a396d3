//! Binary parameter container.
//!
//! Layout: the 8-byte magic `VSSLCKPT`, a little-endian `u64` header length,
//! a UTF-8 JSON header listing each parameter's name, shape, byte offset and
//! byte length, then the raw little-endian `f32` blocks in header order.
//! Offsets are relative to the first byte after the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"VSSLCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Free-form description of the network the parameters belong to.
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value, params: ParamStore) -> Self {
        Self { meta, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            let nbytes = (t.len() * 4) as u64;
            entries.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = serde_json::to_vec(&CheckpointHeader {
            format_version: 1,
            meta: self.meta.clone(),
            params: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing VSSLCKPT magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("checkpoint header length exceeds file".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body_start])
            .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        let body = &bytes[body_start..];
        let mut params = ParamStore::new();
        for e in &header.params {
            let n: usize = e.shape.iter().product();
            if e.nbytes as usize != n * 4 {
                return Err(Error::Format(format!("{}: byte length disagrees with shape", e.name)));
            }
            let start = e.offset as usize;
            let block = body
                .get(start..start + e.nbytes as usize)
                .ok_or_else(|| Error::Format(format!("{}: block out of bounds", e.name)))?;
            let data = block
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Self {
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
