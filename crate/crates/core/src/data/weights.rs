//! `BITW` weight archives.
//!
//! Same discipline as the trial format: magic, `u16` version, then
//! little-endian sections.
//!
//! ```text
//! magic "BITW", version u16 = 1
//! config      u32 length + UTF-8 JSON of the BiteConfig
//! alignment   u8 kind (0 none, 1 fit on input, 2 stored whitener);
//!             kind 2 is followed by u16 C and C*C f64
//! parameters  u32 count; each: u16 name length, name, u8 rank,
//!             rank * u32 dims, f64 values
//! running     u32 count; each: u16 name length, name, u32 channels,
//!             channels f64 means, channels f64 variances
//! ```

use std::fs;
use std::path::Path;

use super::format::Cursor;
use crate::error::{BiteError, Result};
use crate::model::{BiteConfig, BiteModel, RunningStats};
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: [u8; 4] = *b"BITW";
const VERSION: u16 = 1;

/// How inputs are aligned before they reach the network.
#[derive(Debug, Clone, PartialEq)]
pub enum Alignment {
    None,
    /// Fit a fresh alignment on whatever trial set is being evaluated.
    FitOnInput,
    /// Apply this `[C, C]` whitener.
    Whitener(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightArchive {
    pub config: BiteConfig,
    pub alignment: Alignment,
    pub params: Vec<(String, Tensor)>,
    pub running: Vec<RunningStats>,
}

impl WeightArchive {
    pub fn from_model(model: &BiteModel, alignment: Alignment) -> Self {
        Self {
            config: model.config().clone(),
            alignment,
            params: model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            running: model.running_stats().to_vec(),
        }
    }

    pub fn into_model(self) -> Result<(BiteModel, Alignment)> {
        let model = BiteModel::from_parts(self.config, self.params, self.running)?;
        Ok((model, self.alignment))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&WEIGHT_MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).map_err(|e| BiteError::config(e.to_string()))?;
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        match &self.alignment {
            Alignment::None => buf.push(0),
            Alignment::FitOnInput => buf.push(1),
            Alignment::Whitener(w) => {
                buf.push(2);
                buf.extend_from_slice(&(w.shape()[0] as u16).to_le_bytes());
                w.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            }
        }
        let name = |buf: &mut Vec<u8>, n: &str| {
            buf.extend_from_slice(&(n.len() as u16).to_le_bytes());
            buf.extend_from_slice(n.as_bytes());
        };
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (n, t) in &self.params {
            name(&mut buf, n);
            buf.push(t.ndim() as u8);
            t.shape().iter().for_each(|&d| buf.extend_from_slice(&(d as u32).to_le_bytes()));
            t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        }
        buf.extend_from_slice(&(self.running.len() as u32).to_le_bytes());
        for r in &self.running {
            name(&mut buf, &r.name);
            buf.extend_from_slice(&(r.mean.len() as u32).to_le_bytes());
            r.mean.iter().chain(&r.var).for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        cur.magic(WEIGHT_MAGIC)?;
        cur.version(VERSION)?;
        let len = cur.u32()? as usize;
        let json_offset = cur.offset();
        let config: BiteConfig = serde_json::from_slice(cur.take(len)?).map_err(|e| BiteError::Malformed {
            offset: json_offset,
            reason: format!("config JSON: {e}"),
        })?;
        let kind_offset = cur.offset();
        let alignment = match cur.u8()? {
            0 => Alignment::None,
            1 => Alignment::FitOnInput,
            2 => {
                let c = cur.u16()? as usize;
                let data = (0..c * c).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
                Alignment::Whitener(Tensor::new([c, c], data).map_err(|e| BiteError::Malformed {
                    offset: kind_offset,
                    reason: e.to_string(),
                })?)
            }
            other => {
                return Err(BiteError::Malformed {
                    offset: kind_offset,
                    reason: format!("unknown alignment kind {other}"),
                })
            }
        };
        let read_name = |cur: &mut Cursor<'_>| -> Result<String> {
            let n = cur.u16()? as usize;
            let offset = cur.offset();
            String::from_utf8(cur.take(n)?.to_vec()).map_err(|_| BiteError::Malformed {
                offset,
                reason: "name is not UTF-8".into(),
            })
        };
        let n_params = cur.u32()? as usize;
        let mut params = Vec::with_capacity(n_params.min(1024));
        for _ in 0..n_params {
            let name = read_name(&mut cur)?;
            let rank = cur.u8()? as usize;
            let shape_offset = cur.offset();
            let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| BiteError::Malformed {
                offset: shape_offset,
                reason: e.to_string(),
            })?;
            params.push((name, t));
        }
        let n_running = cur.u32()? as usize;
        let mut running = Vec::with_capacity(n_running.min(1024));
        for _ in 0..n_running {
            let name = read_name(&mut cur)?;
            let ch = cur.u32()? as usize;
            let mean = (0..ch).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            let var = (0..ch).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            running.push(RunningStats { name, mean, var });
        }
        cur.finish()?;
        Ok(Self { config, alignment, params, running })
    }
}

pub fn save_weights(path: impl AsRef<Path>, model: &BiteModel, alignment: Alignment) -> Result<()> {
    let path = path.as_ref();
    let bytes = WeightArchive::from_model(model, alignment).encode()?;
    fs::write(path, bytes).map_err(|e| BiteError::io(path, e))
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<WeightArchive> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| BiteError::io(path, e))?;
    WeightArchive::decode(&bytes)
}

/// Loads an archive into a model built for `config`. Any difference between
/// the archived configuration and `config` is an error naming the first
/// differing field.
pub fn load_weights(path: impl AsRef<Path>, config: &BiteConfig) -> Result<(BiteModel, Alignment)> {
    let archive = read_archive(path)?;
    if let Some((field, archived, expected)) = archive.config.first_difference(config) {
        return Err(BiteError::ConfigMismatch { field, archived, expected });
    }
    archive.into_model()
}
