//! Synthetic EEG-like trial sets with known class structure.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Trial, TrialSet};
use crate::error::{BiteError, Result};
use crate::rng::{stream_rng, Stream, DEFAULT_SEED};
use crate::tensor::Tensor;

/// Steady-state evoked responses: each class is a sinusoid at its own
/// frequency in white noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct SsvepSynth {
    pub subjects: usize,
    pub trials_per_class: usize,
    pub class_freqs: Vec<f64>,
    pub fs: f64,
    pub samples: usize,
    pub channels: usize,
    /// Ratio of mean signal power to noise power.
    pub snr: f64,
    pub seed: u64,
}

impl Default for SsvepSynth {
    fn default() -> Self {
        Self {
            subjects: 4,
            trials_per_class: 15,
            class_freqs: (0..12).map(|i| 10.0 + 4.0 * i as f64).collect(),
            fs: 256.0,
            samples: 256,
            channels: 8,
            snr: 10.0,
            seed: DEFAULT_SEED,
        }
    }
}

/// Sensorimotor-rhythm analog: every channel carries 8-30 Hz narrowband
/// noise, and class `c` raises its amplitude on channel group `c`
/// (channels with index `≡ c mod n_classes`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct MiSynth {
    pub subjects: usize,
    pub trials_per_class: usize,
    pub n_classes: usize,
    pub fs: f64,
    pub samples: usize,
    pub channels: usize,
    /// Amplitude factor of the rhythm on the active channel group.
    pub boost: f64,
    /// Standard deviation of the broadband background.
    pub noise: f64,
    pub seed: u64,
}

impl Default for MiSynth {
    fn default() -> Self {
        Self {
            subjects: 2,
            trials_per_class: 40,
            n_classes: 4,
            fs: 128.0,
            samples: 256,
            channels: 8,
            boost: 2.0,
            noise: 0.5,
            seed: DEFAULT_SEED,
        }
    }
}

const MI_BAND: (f64, f64) = (8.0, 30.0);
const MI_STEP_HZ: f64 = 0.5;

fn check_common(subjects: usize, trials_per_class: usize, fs: f64, samples: usize, channels: usize) -> Result<()> {
    if subjects == 0 || trials_per_class == 0 || channels == 0 || samples == 0 {
        return Err(BiteError::config(format!(
            "subjects ({subjects}), trials-per-class ({trials_per_class}), channels ({channels}) and samples ({samples}) must all be >= 1"
        )));
    }
    if subjects > u16::MAX as usize + 1 {
        return Err(BiteError::config("too many subjects for 16-bit ids"));
    }
    if !(fs > 0.0) {
        return Err(BiteError::config(format!("sampling rate must be positive, got {fs}")));
    }
    Ok(())
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn synth_ssvep(p: &SsvepSynth) -> Result<TrialSet> {
    check_common(p.subjects, p.trials_per_class, p.fs, p.samples, p.channels)?;
    let k = p.class_freqs.len();
    if k < 2 {
        return Err(BiteError::config("SSVEP synthesis needs at least two class frequencies"));
    }
    if !(p.snr > 0.0) {
        return Err(BiteError::config(format!("snr must be positive, got {}", p.snr)));
    }
    let nyquist = p.fs / 2.0;
    if let Some(f) = p.class_freqs.iter().find(|&&f| !(f > 0.0 && f < nyquist)) {
        return Err(BiteError::config(format!("class frequency {f} Hz outside (0, {nyquist}) Hz")));
    }
    // one bin of a trial-length DFT
    let resolution = p.fs / p.samples as f64;
    let mut sorted = p.class_freqs.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    if let Some(w) = sorted.windows(2).find(|w| w[1] - w[0] < resolution - 1e-9) {
        return Err(BiteError::config(format!(
            "class frequencies {} and {} Hz are closer than the {resolution} Hz resolution of a {}-sample trial",
            w[0], w[1], p.samples
        )));
    }

    let mut trials = Vec::with_capacity(p.subjects * k * p.trials_per_class);
    for subject in 0..p.subjects {
        let mut rng = stream_rng(p.seed, Stream::Synth, subject as u64);
        let profile: Vec<f64> = (0..p.channels).map(|_| rng.random_range(0.5..1.5)).collect();
        let power = profile.iter().map(|a| a * a / 2.0).sum::<f64>() / p.channels as f64;
        let sigma = (power / p.snr).sqrt();
        for _ in 0..p.trials_per_class {
            for (label, &freq) in p.class_freqs.iter().enumerate() {
                let mut data = Vec::with_capacity(p.channels * p.samples);
                for &amp in &profile {
                    let phase = rng.random_range(0.0..2.0 * PI);
                    let w = 2.0 * PI * freq / p.fs;
                    for t in 0..p.samples {
                        data.push(amp * (w * t as f64 + phase).sin() + sigma * gaussian(&mut rng));
                    }
                }
                trials.push(Trial {
                    subject: subject as u16,
                    session: None,
                    label,
                    signal: Tensor::from_parts(vec![p.channels, p.samples], data),
                });
            }
        }
    }
    TrialSet::new(p.fs, k, trials)
}

pub fn synth_mi(p: &MiSynth) -> Result<TrialSet> {
    check_common(p.subjects, p.trials_per_class, p.fs, p.samples, p.channels)?;
    if p.n_classes < 2 {
        return Err(BiteError::config("motor-imagery synthesis needs at least two classes"));
    }
    if p.channels < p.n_classes {
        return Err(BiteError::config(format!(
            "{} channels cannot host {} class-specific channel groups",
            p.channels, p.n_classes
        )));
    }
    if MI_BAND.1 >= p.fs / 2.0 {
        return Err(BiteError::config(format!(
            "sampling rate {} Hz cannot represent the {}-{} Hz rhythm",
            p.fs, MI_BAND.0, MI_BAND.1
        )));
    }
    if !(p.boost > 0.0) || !(p.noise >= 0.0) {
        return Err(BiteError::config("boost must be positive and noise non-negative"));
    }
    let freqs: Vec<f64> = (0..)
        .map(|i| MI_BAND.0 + MI_STEP_HZ * i as f64)
        .take_while(|&f| f <= MI_BAND.1 + 1e-9)
        .collect();
    let coef_std = (1.0 / freqs.len() as f64).sqrt();
    let (c, t_len) = (p.channels, p.samples);

    let mut trials = Vec::with_capacity(p.subjects * p.n_classes * p.trials_per_class);
    for subject in 0..p.subjects {
        let mut rng = stream_rng(p.seed, Stream::Synth, subject as u64);
        let gain: Vec<f64> = (0..c).map(|_| rng.random_range(0.7..1.3)).collect();
        let leak = rng.random_range(0.0..0.3);
        for _ in 0..p.trials_per_class {
            for label in 0..p.n_classes {
                let mut rhythm = vec![0.0; c * t_len];
                for ch in 0..c {
                    let amp = if ch % p.n_classes == label { p.boost } else { 1.0 };
                    let row = &mut rhythm[ch * t_len..(ch + 1) * t_len];
                    for &f in &freqs {
                        let a = amp * coef_std * gaussian(&mut rng);
                        let b = amp * coef_std * gaussian(&mut rng);
                        let w = 2.0 * PI * f / p.fs;
                        for (t, v) in row.iter_mut().enumerate() {
                            let ph = w * t as f64;
                            *v += a * ph.cos() + b * ph.sin();
                        }
                    }
                }
                let mut data = vec![0.0; c * t_len];
                for ch in 0..c {
                    let prev = (ch + c - 1) % c;
                    let next = (ch + 1) % c;
                    for t in 0..t_len {
                        let mixed = rhythm[ch * t_len + t]
                            + leak * 0.5 * (rhythm[prev * t_len + t] + rhythm[next * t_len + t]);
                        data[ch * t_len + t] = gain[ch] * (mixed + p.noise * gaussian(&mut rng));
                    }
                }
                trials.push(Trial {
                    subject: subject as u16,
                    session: None,
                    label,
                    signal: Tensor::from_parts(vec![c, t_len], data),
                });
            }
        }
    }
    TrialSet::new(p.fs, p.n_classes, trials)
}

/// Mean power of `row` in `[lo, hi]` Hz from a direct DFT (Parseval scaled,
/// so white noise of variance s² spread over the band contributes
/// `s² · width / (fs/2)`).
pub fn band_power(row: &[f64], fs: f64, lo: f64, hi: f64) -> f64 {
    let n = row.len();
    let mut total = 0.0;
    for k in 1..=n / 2 {
        let f = k as f64 * fs / n as f64;
        if f < lo || f > hi {
            continue;
        }
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &x) in row.iter().enumerate() {
            let ph = 2.0 * PI * ((k * t) % n) as f64 / n as f64;
            re += x * ph.cos();
            im -= x * ph.sin();
        }
        let scale = if 2 * k == n { 1.0 } else { 2.0 };
        total += scale * (re * re + im * im) / (n as f64 * n as f64);
    }
    total
}
