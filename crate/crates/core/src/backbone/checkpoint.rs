//! Versioned binary container: magic, version, JSON config record, then
//! parameters sorted by name as (name, shape, little-endian f64 data).

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{FbsError, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FBSCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Model {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.cfg)?;
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        let params = self.store.sorted();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &s in shape {
                out.extend_from_slice(&(s as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(FbsError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FbsError::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let n = r.len()?;
        let cfg: ModelConfig = serde_json::from_slice(r.take(n)?)
            .map_err(|e| FbsError::Checkpoint(format!("config record: {e}")))?;
        let mut model = Model::new(cfg)?;
        let count = r.len()?;
        let mut params = Vec::with_capacity(count);
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let nl = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nl)?)
                .map_err(|_| FbsError::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            if prev.as_ref().is_some_and(|p| *p >= name) {
                return Err(FbsError::Checkpoint(format!("parameters out of order at {name:?}")));
            }
            let nd = r.u32()? as usize;
            let mut shape = Vec::with_capacity(nd);
            for _ in 0..nd {
                shape.push(r.len()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &s| a.checked_mul(s))
                .ok_or_else(|| FbsError::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| FbsError::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| FbsError::Checkpoint(format!("{name}: {e}")))?;
            prev = Some(name.clone());
            params.push((name, t));
        }
        if r.at != bytes.len() {
            return Err(FbsError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        model.load_params(params.iter().map(|(n, t)| (n.as_str(), t.clone())))?;
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FbsError::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| FbsError::Checkpoint(format!("length {v} too large")))
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, model.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Model::from_bytes(&fs::read(path)?)
}
