use serde::{Deserialize, Serialize};

use crate::error::{BiteError, Result};
use crate::signal::StftPlan;

/// Which components of the network are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Ablation {
    pub use_temporal: bool,
    pub use_frequency: bool,
    pub use_attention: bool,
    pub use_bitcn: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        use_temporal: true,
        use_frequency: true,
        use_attention: true,
        use_bitcn: true,
    };

    /// The six ablation configurations, labelled by their active parts:
    /// T(emporal), F(requency), B(iTCN), A(ttention).
    pub fn presets() -> [(&'static str, Ablation); 6] {
        let make = |t, f, a, b| Ablation {
            use_temporal: t,
            use_frequency: f,
            use_attention: a,
            use_bitcn: b,
        };
        [
            ("TB", make(true, false, false, true)),
            ("FB", make(false, true, false, true)),
            ("TF", make(true, true, false, false)),
            ("TFA", make(true, true, true, false)),
            ("TFB", make(true, true, false, true)),
            ("TFBA", make(true, true, true, true)),
        ]
    }

    pub fn preset(label: &str) -> Option<Ablation> {
        Self::presets().into_iter().find(|(l, _)| *l == label).map(|(_, a)| a)
    }

    /// Builds a switch set from component names
    /// (`temporal`, `frequency`, `attention`, `bitcn`).
    pub fn from_components<S: AsRef<str>>(names: &[S]) -> Result<Ablation> {
        let mut a = Ablation {
            use_temporal: false,
            use_frequency: false,
            use_attention: false,
            use_bitcn: false,
        };
        for name in names {
            match name.as_ref() {
                "temporal" => a.use_temporal = true,
                "frequency" => a.use_frequency = true,
                "attention" => a.use_attention = true,
                "bitcn" => a.use_bitcn = true,
                other => {
                    return Err(BiteError::config(format!("unknown ablation component {other:?}")))
                }
            }
        }
        Ok(a)
    }

    pub fn label(&self) -> String {
        let mut s = String::new();
        if self.use_temporal {
            s.push('T');
        }
        if self.use_frequency {
            s.push('F');
        }
        if self.use_bitcn {
            s.push('B');
        }
        if self.use_attention {
            s.push('A');
        }
        s
    }
}

/// Architecture and input geometry of one network.
///
/// Derived sizes: `F2 = f1 * depth`, `T' = samples / pool`, and `F0` is the
/// number of STFT bins inside `band`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct BiteConfig {
    pub channels: usize,
    pub samples: usize,
    pub fs: f64,
    pub n_classes: usize,
    pub f1: usize,
    /// Depth multiplier of the spatial convolution and pyramid depth.
    pub depth: usize,
    pub temporal_kernel: usize,
    pub pool: usize,
    pub stft_window: usize,
    pub band: (f64, f64),
    pub tcn_blocks: usize,
    pub tcn_kernel: usize,
    /// Width of the TCN. `None` means `F2`.
    pub tcn_channels: Option<usize>,
    pub dropout: f64,
    pub ablation: Ablation,
}

impl BiteConfig {
    /// Motor-imagery defaults for the given input geometry.
    pub fn motor_imagery(channels: usize, samples: usize, fs: f64, n_classes: usize) -> Self {
        Self {
            channels,
            samples,
            fs,
            n_classes,
            f1: 8,
            depth: 2,
            temporal_kernel: 64,
            pool: 8,
            stft_window: 64,
            band: (4.0, 40.0),
            tcn_blocks: 2,
            tcn_kernel: 6,
            tcn_channels: None,
            dropout: 0.3,
            ablation: Ablation::FULL,
        }
    }

    /// SSVEP defaults: 32-sample window, 8-64 Hz band.
    pub fn ssvep(channels: usize, samples: usize, fs: f64, n_classes: usize) -> Self {
        Self {
            temporal_kernel: 32,
            stft_window: 32,
            band: (8.0, 64.0),
            ..Self::motor_imagery(channels, samples, fs, n_classes)
        }
    }

    /// Four-class, 22-channel, 1000-sample, 250 Hz setup.
    pub fn reference_mi() -> Self {
        Self::motor_imagery(22, 1000, 250.0, 4)
    }

    pub fn f2(&self) -> usize {
        self.f1 * self.depth
    }

    pub fn pooled_len(&self) -> usize {
        self.samples / self.pool.max(1)
    }

    pub fn stft_plan(&self) -> Result<StftPlan> {
        StftPlan::new(self.fs, self.stft_window, self.band)
    }

    /// Number of selected STFT bins.
    pub fn f0(&self) -> Result<usize> {
        Ok(self.stft_plan()?.n_bins())
    }

    /// Channels entering the sequence model.
    pub fn fused_channels(&self) -> Result<usize> {
        let mut c = 0;
        if self.ablation.use_temporal {
            c += self.f2();
        }
        if self.ablation.use_frequency {
            c += self.f0()?;
        }
        Ok(c)
    }

    pub fn tcn_width(&self) -> usize {
        self.tcn_channels.unwrap_or_else(|| self.f2())
    }

    pub fn receptive_field(&self) -> usize {
        1 + 2 * (self.tcn_kernel - 1) * ((1 << self.tcn_blocks) - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("samples", self.samples),
            ("f1", self.f1),
            ("depth", self.depth),
            ("temporal-kernel", self.temporal_kernel),
            ("pool", self.pool),
            ("stft-window", self.stft_window),
            ("tcn-kernel", self.tcn_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(BiteError::config(format!("{name} must be >= 1")));
            }
        }
        if self.n_classes < 2 {
            return Err(BiteError::config("n-classes must be >= 2"));
        }
        if self.tcn_channels == Some(0) {
            return Err(BiteError::config("tcn-channels must be >= 1"));
        }
        if self.temporal_kernel != self.stft_window {
            return Err(BiteError::config(format!(
                "temporal-kernel ({}) must equal stft-window ({})",
                self.temporal_kernel, self.stft_window
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(BiteError::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let a = self.ablation;
        if !a.use_temporal && !a.use_frequency {
            return Err(BiteError::config("at least one of the temporal and frequency streams must be enabled"));
        }
        if a.use_attention && !(a.use_temporal && a.use_frequency) {
            return Err(BiteError::config("attention requires both the temporal and frequency streams"));
        }
        if self.samples < self.stft_window {
            return Err(BiteError::config(format!(
                "samples ({}) shorter than the STFT window ({})",
                self.samples, self.stft_window
            )));
        }
        if self.pooled_len() < 1 {
            return Err(BiteError::config(format!(
                "pooling factor {} leaves no time steps from {} samples",
                self.pool, self.samples
            )));
        }
        self.stft_plan()?;
        Ok(())
    }

    /// Name of the first field that differs from `other`, in declaration order.
    pub fn first_difference(&self, other: &BiteConfig) -> Option<(String, String, String)> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (a, b) = (a.as_object()?, b.as_object()?);
        const ORDER: [&str; 15] = [
            "channels", "samples", "fs", "n-classes", "f1", "depth", "temporal-kernel", "pool",
            "stft-window", "band", "tcn-blocks", "tcn-kernel", "tcn-channels", "dropout", "ablation",
        ];
        ORDER
            .iter()
            .find(|k| a.get(**k) != b.get(**k))
            .map(|k| (k.to_string(), a[*k].to_string(), b[*k].to_string()))
    }
}
