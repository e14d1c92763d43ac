//! Model checkpoints.
//!
//! ```text
//! magic     8 bytes "ADPSCKPT"
//! version   u32
//! meta      u32 byte length, UTF-8 JSON {model, strategy}
//! params    u32 count, then per parameter:
//!           u32 path length, path bytes, u32 rank, rank × u64 dims,
//!           f64 values
//! ```
//!
//! All integers and floats are little-endian; a load reproduces every
//! parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::tensor::{ParamSet, Tensor};
use crate::training::Strategy;

const MAGIC: &[u8; 8] = b"ADPSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelSpec,
    strategy: Strategy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub strategy: Strategy,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&Meta {
            model: self.model.clone(),
            strategy: self.strategy,
        })
        .expect("checkpoint metadata serializes");
        let mut out = Vec::with_capacity(32 + meta.len() + 8 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (path, t) in self.params.iter() {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::format(path, format!("bad metadata: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "parameter path is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "oversized tensor"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::format(path, e.to_string()))?;
            params
                .insert(name, t)
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after parameters"));
        }
        meta.model.validate()?;
        Ok(Self {
            model: meta.model,
            strategy: meta.strategy,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
