//! Deterministic signal frontend: unit-hop STFT over a task band and
//! Euclidean Alignment of raw trials.

mod alignment;
mod stft;

pub use alignment::{ea_apply, ea_fit, AlignmentState, EIGEN_FLOOR};
pub use stft::{band_bins, hann_window, stft_magnitude, Spectrogram, StftPlan};
