use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{BiteError, Result};
use crate::tensor::Tensor;

/// Periodic Hann window, `w[n] = 0.5 * (1 - cos(2πn / N))`.
pub fn hann_window(n: usize) -> Result<Tensor> {
    if n < 2 {
        return Err(BiteError::config(format!("Hann window length must be >= 2, got {n}")));
    }
    Ok(Tensor::from_fn([n], |i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos())))
}

/// DFT bins `k` in `1..=N/2` whose centre frequency `k * fs / N` lies in
/// `[f_lo, f_hi]`. The DC bin is never selected.
pub fn band_bins(fs: f64, n: usize, f_lo: f64, f_hi: f64) -> Result<Vec<usize>> {
    if !(fs > 0.0) || n < 2 {
        return Err(BiteError::config(format!(
            "invalid STFT geometry: fs = {fs}, window = {n}"
        )));
    }
    if !(0.0 < f_lo && f_lo < f_hi && f_hi <= fs / 2.0) {
        return Err(BiteError::config(format!(
            "band {f_lo}-{f_hi} Hz must satisfy 0 < low < high <= Nyquist ({} Hz)",
            fs / 2.0
        )));
    }
    let tol = 1e-9 * fs;
    let bins: Vec<usize> = (1..=n / 2)
        .filter(|&k| {
            let f = k as f64 * fs / n as f64;
            f >= f_lo - tol && f <= f_hi + tol
        })
        .collect();
    if bins.is_empty() {
        return Err(BiteError::config(format!(
            "band {f_lo}-{f_hi} Hz contains no DFT bin at resolution {} Hz",
            fs / n as f64
        )));
    }
    Ok(bins)
}

/// A reusable STFT configuration: window, unit hop, and the selected band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PlanSpec", into = "PlanSpec")]
pub struct StftPlan {
    window_len: usize,
    fs: f64,
    band: (f64, f64),
    bins: Vec<usize>,
    window: Vec<f64>,
    // per selected bin: window-weighted cos and -sin taps
    cos_taps: Vec<f64>,
    sin_taps: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PlanSpec {
    window_len: usize,
    fs: f64,
    band: (f64, f64),
}

impl From<PlanSpec> for StftPlan {
    fn from(s: PlanSpec) -> Self {
        StftPlan::new(s.fs, s.window_len, s.band).expect("serialized plan was valid")
    }
}

impl From<StftPlan> for PlanSpec {
    fn from(p: StftPlan) -> Self {
        PlanSpec { window_len: p.window_len, fs: p.fs, band: p.band }
    }
}

impl StftPlan {
    pub fn new(fs: f64, window_len: usize, band: (f64, f64)) -> Result<Self> {
        let window = hann_window(window_len)?.into_data();
        let bins = band_bins(fs, window_len, band.0, band.1)?;
        let mut cos_taps = Vec::with_capacity(bins.len() * window_len);
        let mut sin_taps = Vec::with_capacity(bins.len() * window_len);
        for &k in &bins {
            for (n, w) in window.iter().enumerate() {
                // reduce k*n mod N first so the phase stays exact for long windows
                let phase = 2.0 * PI * ((k * n) % window_len) as f64 / window_len as f64;
                cos_taps.push(w * phase.cos());
                sin_taps.push(-w * phase.sin());
            }
        }
        Ok(Self { window_len, fs, band, bins, window, cos_taps, sin_taps })
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    /// Always 1: one frame per input sample.
    pub fn hop(&self) -> usize {
        1
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn band(&self) -> (f64, f64) {
        self.band
    }

    pub fn bins(&self) -> &[usize] {
        &self.bins
    }

    /// Number of selected frequency bins.
    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Zeros added before and after the signal so there is one frame per sample.
    pub fn padding(&self) -> (usize, usize) {
        let left = self.window_len / 2;
        (left, self.window_len - 1 - left)
    }
}

/// Band-limited STFT magnitudes of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// `[F0, C, T]` magnitudes.
    pub values: Tensor,
}

/// Magnitude STFT of a `[C, T]` signal with hop 1.
///
/// The signal is zero-padded by `N/2` on the left and `N - 1 - N/2` on the
/// right, so frame `t` covers padded samples `t..t + N` and the frame count
/// equals `T`.
pub fn stft_magnitude(signal: &Tensor, plan: &StftPlan) -> Result<Spectrogram> {
    if signal.ndim() != 2 {
        return Err(BiteError::shape(format!(
            "STFT expects a [C, T] signal, got {:?}",
            signal.shape()
        )));
    }
    let (channels, samples) = (signal.shape()[0], signal.shape()[1]);
    let n = plan.window_len;
    if samples < n {
        return Err(BiteError::InputTooShort { samples, window: n });
    }
    let (left, right) = plan.padding();
    let f0 = plan.n_bins();
    let mut out = vec![0.0; f0 * channels * samples];
    let mut padded = vec![0.0; samples + left + right];
    for c in 0..channels {
        padded[left..left + samples].copy_from_slice(&signal.data()[c * samples..(c + 1) * samples]);
        for t in 0..samples {
            let frame = &padded[t..t + n];
            for j in 0..f0 {
                let ct = &plan.cos_taps[j * n..(j + 1) * n];
                let st = &plan.sin_taps[j * n..(j + 1) * n];
                let (mut re, mut im) = (0.0, 0.0);
                for ((x, a), b) in frame.iter().zip(ct).zip(st) {
                    re += x * a;
                    im += x * b;
                }
                out[(j * channels + c) * samples + t] = re.hypot(im);
            }
        }
    }
    Ok(Spectrogram { values: Tensor::from_parts(vec![f0, channels, samples], out) })
}
