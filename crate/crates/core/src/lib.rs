//! Dual-stream time-frequency EEG classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and a small reverse-mode autodiff tape
//! * [`signal`]: Hann-windowed STFT with unit hop and Euclidean Alignment
//! * [`model`]: temporal and frequency streams, pyramid time-frequency
//!   attention, the bidirectional TCN and adaptive fusion
//! * [`training`]: loss, optimizer, evaluation protocols and metrics
//! * [`data`]: the binary trial format, weight archives and synthetic
//!   EEG-like generators
//! * [`verify`]: the bundled numerical self-check battery

pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod signal;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{BiteError, Result};
pub use tensor::{Graph, Mode, Tensor, Var};
