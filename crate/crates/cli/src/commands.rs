use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use bite_core::data::{read_archive, read_trials, save_weights, write_trials, MiSynth, SsvepSynth};
use bite_core::model::{Ablation, BiteConfig};
use bite_core::tensor::OpKind;
use bite_core::training::{
    evaluate, hyper_sweep, train_and_eval, EvalReport, Protocol, TrainConfig, TrainOutcome, DEFAULT_DROPOUTS,
    DEFAULT_KERNELS,
};
use bite_core::verify::run_battery;
use rayon::prelude::*;
use serde::Serialize;

use crate::run_config::{DataSection, RunSetup};
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct ConfigEcho {
    pub model: BiteConfig,
    pub train: TrainConfig,
    pub protocol: Protocol,
    pub data: DataSection,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub report: EvalReport,
    pub config_echo: ConfigEcho,
    pub seed: u64,
}

/// Writes one line to stdout; a closed pipe is not an error.
fn emit(line: impl std::fmt::Display) -> Result<(), CliError> {
    match writeln!(io::stdout().lock(), "{line}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(CliError::Data(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn make_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))
}

struct Prepared {
    setup: RunSetup,
    set: bite_core::data::TrialSet,
    config: BiteConfig,
    train: TrainConfig,
}

fn prepare(config_path: &Path, seed: Option<u64>) -> Result<Prepared, CliError> {
    let setup = RunSetup::load(config_path)?;
    let mut train = setup.file.train.clone();
    if let Some(seed) = seed {
        train.seed = seed;
    }
    train.epochs = Some(train.epochs_for(setup.file.protocol));
    train.validate()?;
    let set = setup.load_data()?;
    let config = setup.model_config(&set)?;
    Ok(Prepared { setup, set, config, train })
}

pub fn train(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let p = prepare(config_path, seed)?;
    let protocol = p.setup.file.protocol;
    let TrainOutcome { report, folds } = train_and_eval(&p.config, &p.train, &p.set, protocol)?;
    make_out_dir(out)?;
    for fold in &folds {
        for line in &fold.epochs {
            emit(line)?;
        }
        let id = fold.fold.subject;
        save_weights(out.join(format!("weights-{id}.bitw")), &fold.model, fold.alignment.clone())?;
        write_trials(out.join(format!("test-{id}.bite")), &p.set.subset(&fold.fold.test))?;
    }
    let report = RunReport {
        report,
        config_echo: ConfigEcho {
            model: p.config,
            train: p.train.clone(),
            protocol,
            data: p.setup.file.data.clone(),
        },
        seed: p.train.seed,
    };
    write_json(&out.join("report.json"), &report)
}

pub fn eval(weights: &Path, data: &Path) -> Result<(), CliError> {
    let archive = read_archive(weights)?;
    let set = read_trials(data)?;
    let (model, alignment) = archive.into_model()?;
    let all: Vec<usize> = (0..set.len()).collect();
    let subjects = evaluate(&model, &alignment, &set, &all)?;
    let report = EvalReport::from_subjects(&subjects, true)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    emit(text)
}

pub fn ablate(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let p = prepare(config_path, seed)?;
    let protocol = p.setup.file.protocol;
    let results = Ablation::presets()
        .par_iter()
        .map(|(label, ablation)| {
            let config = BiteConfig { ablation: *ablation, ..p.config.clone() };
            config.validate()?;
            let outcome = train_and_eval(&config, &p.train, &p.set, protocol)?;
            Ok((label.to_string(), outcome.report))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    for (label, r) in &results {
        emit(format_args!("label={label} accuracy={:.4} kappa={:.4}", r.accuracy, r.kappa))?;
    }
    make_out_dir(out)?;
    let map: BTreeMap<String, EvalReport> = results.into_iter().collect();
    write_json(&out.join("ablation.json"), &map)
}

fn parse_list<T: std::str::FromStr + Clone>(text: Option<&str>, default: &[T], what: &str) -> Result<Vec<T>, CliError> {
    let Some(text) = text else { return Ok(default.to_vec()) };
    let items = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| CliError::Config(format!("invalid {what} entry {s:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if items.is_empty() {
        return Err(CliError::Config(format!("the {what} list is empty")));
    }
    Ok(items)
}

pub fn sweep(
    config_path: &Path,
    kernels: Option<&str>,
    dropouts: Option<&str>,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let kernels = parse_list(kernels, &DEFAULT_KERNELS, "kernel")?;
    let dropouts = parse_list(dropouts, &DEFAULT_DROPOUTS, "dropout")?;
    let p = prepare(config_path, seed)?;
    let table = hyper_sweep(&kernels, &dropouts, &p.config, &p.train, &p.set, p.setup.file.protocol)?;
    for row in &table.row_averages {
        emit(format_args!("kernel={} avg-accuracy={:.4}", row.kernel, row.accuracy))?;
    }
    make_out_dir(out)?;
    write_json(&out.join("sweep.json"), &table)
}

pub fn verify(fault: Option<&str>) -> Result<(), CliError> {
    let fault = match fault {
        Some(name) => Some(OpKind::parse(name).ok_or_else(|| CliError::Config(format!("unknown op {name:?}")))?),
        None => None,
    };
    let results = run_battery(fault);
    for r in &results {
        emit(r)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(format!("verification failed: {}", failed.join(", "))))
    }
}

pub struct SynthCommon {
    pub seed: Option<u64>,
    pub subjects: Option<usize>,
    pub trials_per_class: Option<usize>,
    pub fs: Option<f64>,
    pub samples: Option<usize>,
    pub channels: Option<usize>,
}

pub fn synth_ssvep(out: &Path, c: SynthCommon, snr: Option<f64>, freqs: Option<&str>) -> Result<(), CliError> {
    let d = SsvepSynth::default();
    let spec = SsvepSynth {
        subjects: c.subjects.unwrap_or(d.subjects),
        trials_per_class: c.trials_per_class.unwrap_or(d.trials_per_class),
        class_freqs: parse_list(freqs, &d.class_freqs, "frequency")?,
        fs: c.fs.unwrap_or(d.fs),
        samples: c.samples.unwrap_or(d.samples),
        channels: c.channels.unwrap_or(d.channels),
        snr: snr.unwrap_or(d.snr),
        seed: c.seed.unwrap_or(d.seed),
    };
    let set = bite_core::data::synth_ssvep(&spec)?;
    write_trials(out, &set)?;
    Ok(())
}

pub fn synth_mi(
    out: &Path,
    c: SynthCommon,
    classes: Option<usize>,
    boost: Option<f64>,
    noise: Option<f64>,
) -> Result<(), CliError> {
    let d = MiSynth::default();
    let spec = MiSynth {
        subjects: c.subjects.unwrap_or(d.subjects),
        trials_per_class: c.trials_per_class.unwrap_or(d.trials_per_class),
        n_classes: classes.unwrap_or(d.n_classes),
        fs: c.fs.unwrap_or(d.fs),
        samples: c.samples.unwrap_or(d.samples),
        channels: c.channels.unwrap_or(d.channels),
        boost: boost.unwrap_or(d.boost),
        noise: noise.unwrap_or(d.noise),
        seed: c.seed.unwrap_or(d.seed),
    };
    let set = bite_core::data::synth_mi(&spec)?;
    write_trials(out, &set)?;
    Ok(())
}
