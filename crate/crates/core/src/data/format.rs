//! The `BITE` trial container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! header (22 bytes)
//!   magic       4  b"BITE"
//!   version     u16 = 1
//!   n_trials    u32
//!   channels    u16
//!   samples     u32
//!   fs          f32
//!   n_classes   u16
//! per trial
//!   subject     u16
//!   label       u16
//!   tag_len     u8, followed by tag_len bytes of UTF-8 session tag
//!   samples     channels * samples f32, channel-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Trial, TrialSet};
use crate::error::{BiteError, Result};
use crate::tensor::Tensor;

pub const TRIAL_MAGIC: [u8; 4] = *b"BITE";
const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4 + 2 + 4 + 4 + 2;
/// Fixed bytes per trial before the tag and the samples.
pub const TRIAL_OVERHEAD: usize = 2 + 2 + 1;

pub fn write_trials(path: impl AsRef<Path>, set: &TrialSet) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_trials_to(&mut buf, set)?;
    fs::write(path, buf).map_err(|e| BiteError::io(path, e))
}

pub fn write_trials_to<W: Write>(mut w: W, set: &TrialSet) -> Result<()> {
    set.validate()?;
    let (c, t) = (set.channels(), set.samples());
    let narrow = |what: &str, v: usize, max: usize| -> Result<()> {
        if v > max {
            return Err(BiteError::config(format!("{what} = {v} does not fit the trial format (max {max})")));
        }
        Ok(())
    };
    narrow("n-trials", set.len(), u32::MAX as usize)?;
    narrow("channels", c, u16::MAX as usize)?;
    narrow("samples", t, u32::MAX as usize)?;
    narrow("n-classes", set.n_classes, u16::MAX as usize)?;

    let mut buf = Vec::with_capacity(HEADER_LEN + set.len() * (TRIAL_OVERHEAD + 4 * c * t));
    buf.extend_from_slice(&TRIAL_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(c as u16).to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(set.fs as f32).to_le_bytes());
    buf.extend_from_slice(&(set.n_classes as u16).to_le_bytes());
    for trial in &set.trials {
        let tag = trial.session.as_deref().unwrap_or("");
        narrow("session tag length", tag.len(), u8::MAX as usize)?;
        buf.extend_from_slice(&trial.subject.to_le_bytes());
        buf.extend_from_slice(&(trial.label as u16).to_le_bytes());
        buf.push(tag.len() as u8);
        buf.extend_from_slice(tag.as_bytes());
        for v in trial.signal.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| BiteError::io("<trial stream>", e))
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<TrialSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| BiteError::io(path, e))?;
    parse(&bytes)
}

pub fn read_trials_from<R: Read>(mut r: R) -> Result<TrialSet> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| BiteError::io("<trial stream>", e))?;
    parse(&bytes)
}

/// Little-endian cursor that reports the offset of every failure.
pub(super) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(super) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(super) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(super) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(BiteError::Truncated {
                offset: self.pos as u64,
                expected: n as u64,
                actual: remaining as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(super) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(super) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(super) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(super) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(super) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(super) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let offset = self.offset();
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(BiteError::BadMagic { offset, expected, found });
        }
        Ok(())
    }

    pub(super) fn version(&mut self, supported: u16) -> Result<u16> {
        let offset = self.offset();
        let version = self.u16()?;
        if version == 0 || version > supported {
            return Err(BiteError::UnsupportedVersion { offset, version });
        }
        Ok(version)
    }

    pub(super) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(BiteError::Malformed {
                offset: self.pos as u64,
                reason: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn parse(bytes: &[u8]) -> Result<TrialSet> {
    let mut cur = Cursor::new(bytes);
    cur.magic(TRIAL_MAGIC)?;
    cur.version(VERSION)?;
    let n_trials = cur.u32()? as usize;
    let channels = cur.u16()? as usize;
    let samples = cur.u32()? as usize;
    let fs_offset = cur.offset();
    let fs = cur.f32()? as f64;
    let n_classes = cur.u16()? as usize;
    if n_trials == 0 || channels == 0 || samples == 0 || n_classes == 0 || !(fs > 0.0) {
        return Err(BiteError::Malformed {
            offset: fs_offset,
            reason: format!(
                "header fields must be positive: trials {n_trials}, channels {channels}, samples {samples}, fs {fs}, classes {n_classes}"
            ),
        });
    }
    let payload = channels * samples;
    let mut trials = Vec::with_capacity(n_trials.min(1 << 16));
    for _ in 0..n_trials {
        let subject = cur.u16()?;
        let label_offset = cur.offset();
        let label = cur.u16()? as usize;
        if label >= n_classes {
            return Err(BiteError::LabelOutOfRange { offset: label_offset, label, n_classes });
        }
        let tag_len = cur.u8()? as usize;
        let tag_offset = cur.offset();
        let tag = cur.take(tag_len)?;
        let session = match tag_len {
            0 => None,
            _ => Some(String::from_utf8(tag.to_vec()).map_err(|_| BiteError::Malformed {
                offset: tag_offset,
                reason: "session tag is not UTF-8".into(),
            })?),
        };
        let raw = cur.take(4 * payload)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        trials.push(Trial {
            subject,
            session,
            label,
            signal: Tensor::from_parts(vec![channels, samples], data),
        });
    }
    cur.finish()?;
    Ok(TrialSet { fs, n_classes, trials })
}
