//! Binary trajectory files and their metadata sidecars.
//!
//! Layout, little-endian: magic `PNDE`, version `u32`, tag length `u32`,
//! tag bytes, state width `u32`, trajectory count `u32`, states per
//! trajectory `u32`, `dt` as `f64`, then every state row-major as `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::SystemConfig;
use crate::training::Split;

const MAGIC: &[u8; 4] = b"PNDE";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tag: String,
    pub dim: usize,
    pub dt: f64,
    /// `trajectories[i][k]` is state `k` of trajectory `i`.
    pub trajectories: Vec<Vec<Vec<f64>>>,
}

/// Contents of the `.toml` file written next to every dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub split: Split,
    pub seed: u64,
    pub tolerance: f64,
    pub system: SystemConfig,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

impl Dataset {
    pub fn steps(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.len())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.steps()).map(|k| k as f64 * self.dt).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let steps = self.steps();
        for t in &self.trajectories {
            if t.len() != steps || t.iter().any(|s| s.len() != self.dim) {
                return Err(Error::Contract("ragged dataset".into()));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tag.len() as u32).to_le_bytes());
        out.extend_from_slice(self.tag.as_bytes());
        for x in [self.dim, self.trajectories.len(), steps] {
            out.extend_from_slice(&(x as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.dt.to_le_bytes());
        for x in self.trajectories.iter().flatten().flatten() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos + n;
            if end > bytes.len() {
                return Err(Error::Format(format!("truncated dataset at byte {pos}")));
            }
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        if take(4)? != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = u32_at(take(4)?);
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let tag_len = u32_at(take(4)?);
        if tag_len > 256 {
            return Err(Error::Format(format!("implausible tag length {tag_len}")));
        }
        let tag = std::str::from_utf8(take(tag_len)?)
            .map_err(|_| Error::Format("system tag is not UTF-8".into()))?
            .to_string();
        let dim = u32_at(take(4)?);
        let count = u32_at(take(4)?);
        let steps = u32_at(take(4)?);
        let dt = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        if !(dt > 0.0 && dt.is_finite()) || dim == 0 {
            return Err(Error::Format(format!("bad header: dim {dim}, dt {dt}")));
        }
        let expected = count
            .checked_mul(steps)
            .and_then(|x| x.checked_mul(dim))
            .and_then(|x| x.checked_mul(8))
            .ok_or_else(|| Error::Format("dataset header overflows".into()))?;
        let data = take(expected)?;
        if pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format("non-finite state in dataset".into()));
        }
        let trajectories = values
            .chunks_exact((steps * dim).max(1))
            .take(count)
            .map(|t| t.chunks_exact(dim).map(|s| s.to_vec()).collect())
            .collect();
        Ok(Self {
            tag,
            dim,
            dt,
            trajectories,
        })
    }

    pub fn save(&self, path: &Path, meta: &DatasetMeta) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        let text = toml::to_string(meta).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(sidecar_path(path), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn load_meta(path: &Path) -> Result<DatasetMeta> {
        let text = fs::read_to_string(sidecar_path(path))?;
        toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))
    }
}
