//! Trial containers, on-disk formats and synthetic data.

mod format;
mod synth;
mod weights;

pub use format::{read_trials, read_trials_from, write_trials, write_trials_to, HEADER_LEN, TRIAL_MAGIC, TRIAL_OVERHEAD};
pub use synth::{band_power, synth_mi, synth_ssvep, MiSynth, SsvepSynth};
pub use weights::{load_weights, read_archive, save_weights, Alignment, WeightArchive, WEIGHT_MAGIC};

use crate::error::{BiteError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub subject: u16,
    pub session: Option<String>,
    pub label: usize,
    /// `[C, T]`.
    pub signal: Tensor,
}

/// A batch of equally shaped trials sharing one sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub fs: f64,
    pub n_classes: usize,
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn new(fs: f64, n_classes: usize, trials: Vec<Trial>) -> Result<Self> {
        let set = Self { fs, n_classes, trials };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .trials
            .first()
            .ok_or_else(|| BiteError::config("a trial set needs at least one trial"))?;
        if first.signal.ndim() != 2 {
            return Err(BiteError::shape(format!("trial signals must be [C, T], got {:?}", first.signal.shape())));
        }
        if !(self.fs > 0.0) || self.n_classes == 0 {
            return Err(BiteError::config(format!(
                "invalid trial set header: fs = {}, n-classes = {}",
                self.fs, self.n_classes
            )));
        }
        for (i, t) in self.trials.iter().enumerate() {
            if t.signal.shape() != first.signal.shape() {
                return Err(BiteError::shape(format!(
                    "trial {i} has shape {:?}, expected {:?}",
                    t.signal.shape(),
                    first.signal.shape()
                )));
            }
            if t.label >= self.n_classes {
                return Err(BiteError::config(format!(
                    "trial {i} label {} out of range for {} classes",
                    t.label, self.n_classes
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.trials[0].signal.shape()[0]
    }

    pub fn samples(&self) -> usize {
        self.trials[0].signal.shape()[1]
    }

    /// Distinct subject ids in ascending order.
    pub fn subjects(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.trials.iter().map(|t| t.subject).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// A new set holding the trials at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> TrialSet {
        TrialSet {
            fs: self.fs,
            n_classes: self.n_classes,
            trials: indices.iter().map(|&i| self.trials[i].clone()).collect(),
        }
    }

    /// The same set with every sample rounded through `f32`, i.e. exactly
    /// what a write/read round trip produces.
    pub fn quantized(&self) -> TrialSet {
        TrialSet {
            fs: self.fs as f32 as f64,
            n_classes: self.n_classes,
            trials: self
                .trials
                .iter()
                .map(|t| Trial {
                    signal: t.signal.map(|v| v as f32 as f64),
                    session: t.session.clone().filter(|s| !s.is_empty()),
                    ..t.clone()
                })
                .collect(),
        }
    }
}
