//! The JSON run configuration shared by `train`, `ablate` and `sweep`.

use std::fs;
use std::path::{Path, PathBuf};

use bite_core::data::{read_trials, synth_mi, synth_ssvep, MiSynth, SsvepSynth, TrialSet};
use bite_core::model::{Ablation, BiteConfig};
use bite_core::training::{Protocol, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    MotorImagery,
    Ssvep,
}

/// Overrides on top of a preset whose input geometry comes from the data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<Preset>,
    pub f1: Option<usize>,
    pub depth: Option<usize>,
    pub temporal_kernel: Option<usize>,
    pub pool: Option<usize>,
    pub stft_window: Option<usize>,
    pub band: Option<(f64, f64)>,
    pub tcn_blocks: Option<usize>,
    pub tcn_kernel: Option<usize>,
    pub tcn_channels: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct DataSection {
    /// A `BITE` trial file, relative to the config file's directory.
    pub path: Option<PathBuf>,
    pub synth_ssvep: Option<SsvepSynth>,
    pub synth_mi: Option<MiSynth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSection,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    /// Components to enable; all four when absent.
    #[serde(default)]
    pub ablation: Option<Vec<String>>,
}

fn default_protocol() -> Protocol {
    Protocol::WithinSubject
}

/// A parsed configuration together with the directory relative paths are
/// resolved against.
pub struct RunSetup {
    pub file: RunConfigFile,
    pub base_dir: PathBuf,
}

impl RunSetup {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let file = parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { file, base_dir })
    }

    pub fn load_data(&self) -> Result<TrialSet, CliError> {
        let d = &self.file.data;
        let set = match (&d.path, &d.synth_ssvep, &d.synth_mi) {
            (Some(p), None, None) => read_trials(self.base_dir.join(p))?,
            // synthetic data goes through f32 so it matches what a written
            // test partition reads back as
            (None, Some(s), None) => synth_ssvep(s)?.quantized(),
            (None, None, Some(s)) => synth_mi(s)?.quantized(),
            _ => {
                return Err(CliError::Config(
                    "data: exactly one of `path`, `synth-ssvep` or `synth-mi` is required".into(),
                ))
            }
        };
        Ok(set)
    }

    pub fn ablation(&self) -> Result<Ablation, CliError> {
        match &self.file.ablation {
            Some(names) => Ok(Ablation::from_components(names)?),
            None => Ok(Ablation::FULL),
        }
    }

    /// The model configuration for `set` with the file's overrides applied.
    pub fn model_config(&self, set: &TrialSet) -> Result<BiteConfig, CliError> {
        let m = &self.file.model;
        let preset = m.preset.unwrap_or(match self.file.data.synth_ssvep {
            Some(_) => Preset::Ssvep,
            None => Preset::MotorImagery,
        });
        let (c, t, fs, k) = (set.channels(), set.samples(), set.fs, set.n_classes);
        let base = match preset {
            Preset::MotorImagery => BiteConfig::motor_imagery(c, t, fs, k),
            Preset::Ssvep => BiteConfig::ssvep(c, t, fs, k),
        };
        let config = BiteConfig {
            f1: m.f1.unwrap_or(base.f1),
            depth: m.depth.unwrap_or(base.depth),
            temporal_kernel: m.temporal_kernel.unwrap_or(base.temporal_kernel),
            pool: m.pool.unwrap_or(base.pool),
            stft_window: m.stft_window.unwrap_or(base.stft_window),
            band: m.band.unwrap_or(base.band),
            tcn_blocks: m.tcn_blocks.unwrap_or(base.tcn_blocks),
            tcn_kernel: m.tcn_kernel.unwrap_or(base.tcn_kernel),
            tcn_channels: m.tcn_channels.or(base.tcn_channels),
            dropout: m.dropout.unwrap_or(base.dropout),
            ablation: self.ablation()?,
            ..base
        };
        config.validate()?;
        Ok(config)
    }
}

/// Parses a run configuration, naming the key path of any offending entry.
pub fn parse(text: &str) -> Result<RunConfigFile, String> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        format!("at `{path}`: {}", e.into_inner())
    })
}
