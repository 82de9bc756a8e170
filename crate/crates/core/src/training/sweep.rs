//! Grid search over TCN kernel size and dropout.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::harness::{train_and_eval, Protocol, TrainConfig};
use crate::data::TrialSet;
use crate::error::{BiteError, Result};
use crate::model::BiteConfig;

pub const DEFAULT_KERNELS: [usize; 4] = [3, 6, 9, 12];
pub const DEFAULT_DROPOUTS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub kernel: usize,
    pub dropout: f64,
    pub accuracy: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowAverage {
    pub kernel: usize,
    pub accuracy: f64,
}

/// Cells in row-major order (kernels outer, dropouts inner) and the mean
/// accuracy of each kernel row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub kernels: Vec<usize>,
    pub dropouts: Vec<f64>,
    pub cells: Vec<SweepCell>,
    pub row_averages: Vec<RowAverage>,
}

impl SweepTable {
    pub fn cell(&self, kernel: usize, dropout: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.kernel == kernel && c.dropout == dropout)
    }
}

pub fn hyper_sweep(
    kernels: &[usize],
    dropouts: &[f64],
    base: &BiteConfig,
    train: &TrainConfig,
    set: &TrialSet,
    protocol: Protocol,
) -> Result<SweepTable> {
    if kernels.is_empty() || dropouts.is_empty() {
        return Err(BiteError::config("the sweep grid is empty"));
    }
    let grid: Vec<(usize, f64)> = kernels.iter().flat_map(|&k| dropouts.iter().map(move |&d| (k, d))).collect();
    let configs = grid
        .iter()
        .map(|&(kernel, dropout)| {
            let cfg = BiteConfig { tcn_kernel: kernel, dropout, ..base.clone() };
            cfg.validate().map(|_| cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = grid
        .par_iter()
        .zip(configs.par_iter())
        .map(|(&(kernel, dropout), cfg)| {
            let report = train_and_eval(cfg, train, set, protocol)?.report;
            Ok(SweepCell { kernel, dropout, accuracy: report.accuracy, kappa: report.kappa })
        })
        .collect::<Result<Vec<_>>>()?;
    let row_averages = kernels
        .iter()
        .enumerate()
        .map(|(r, &kernel)| {
            let row = &cells[r * dropouts.len()..(r + 1) * dropouts.len()];
            RowAverage { kernel, accuracy: row.iter().map(|c| c.accuracy).sum::<f64>() / row.len() as f64 }
        })
        .collect();
    Ok(SweepTable { kernels: kernels.to_vec(), dropouts: dropouts.to_vec(), cells, row_averages })
}
