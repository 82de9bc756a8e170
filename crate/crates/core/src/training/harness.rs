//! Fold-level training and evaluation.

use std::fmt;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{self, Confusion};
use super::optim::{Adam, AdamConfig};
use super::split::{split_loso, split_within_subject, Fold};
use crate::data::{Alignment, TrialSet};
use crate::error::{BiteError, Result};
use crate::model::{Batch, BiteConfig, BiteModel};
use crate::rng::{stream_rng, Stream, DEFAULT_SEED};
use crate::signal::{ea_apply, ea_fit, stft_magnitude, AlignmentState};
use crate::tensor::{Graph, Mode, Tensor};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    WithinSubject,
    Loso,
}

impl Protocol {
    pub fn default_epochs(self) -> usize {
        match self {
            Protocol::WithinSubject => 300,
            Protocol::Loso => 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TrainConfig {
    /// `None` picks the protocol's default.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Fraction of each class used for training when a subject has no
    /// session tags.
    pub train_ratio: f64,
    /// Euclidean alignment of inputs.
    pub align: bool,
    /// Divide by `n` rather than `n - 1` for across-subject deviations.
    pub population_std: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: None,
            batch_size: 64,
            learning_rate: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: DEFAULT_SEED,
            shuffle: true,
            train_ratio: 0.8,
            align: true,
            population_std: true,
        }
    }
}

impl TrainConfig {
    pub fn epochs_for(&self, protocol: Protocol) -> usize {
        self.epochs.unwrap_or_else(|| protocol.default_epochs())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == Some(0) {
            return Err(BiteError::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(BiteError::config("batch-size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(BiteError::config(format!("learning-rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(BiteError::config("beta1 and beta2 must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub id: u16,
    pub accuracy: f64,
    pub kappa: f64,
    pub trials: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Pooled over every test trial.
    pub accuracy: f64,
    pub kappa: f64,
    pub confusion: Confusion,
    pub per_subject: Vec<SubjectScore>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub kappa_mean: f64,
    pub kappa_std: f64,
}

impl EvalReport {
    /// Aggregates per-subject confusions, given in reporting order.
    pub fn from_subjects(subjects: &[(u16, Confusion)], population_std: bool) -> Result<Self> {
        let (_, first) = subjects
            .first()
            .ok_or_else(|| BiteError::config("no subjects to report on"))?;
        let mut pooled = vec![vec![0; first.len()]; first.len()];
        let mut per_subject = Vec::with_capacity(subjects.len());
        for (id, m) in subjects {
            metrics::add_confusion(&mut pooled, m);
            per_subject.push(SubjectScore {
                id: *id,
                accuracy: metrics::accuracy(m)?,
                kappa: metrics::kappa(m)?,
                trials: m.iter().flatten().sum(),
            });
        }
        let accs: Vec<f64> = per_subject.iter().map(|s| s.accuracy).collect();
        let kappas: Vec<f64> = per_subject.iter().map(|s| s.kappa).collect();
        let (accuracy_mean, accuracy_std) = metrics::mean_std(&accs, population_std);
        let (kappa_mean, kappa_std) = metrics::mean_std(&kappas, population_std);
        Ok(Self {
            accuracy: metrics::accuracy(&pooled)?,
            kappa: metrics::kappa(&pooled)?,
            confusion: pooled,
            per_subject,
            accuracy_mean,
            accuracy_std,
            kappa_mean,
            kappa_std,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub fold: u16,
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} fold={} loss={:.6} acc={:.4}", self.epoch, self.fold, self.loss, self.acc)
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: Fold,
    pub model: BiteModel,
    pub alignment: Alignment,
    pub confusion: Confusion,
    pub epochs: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: EvalReport,
    pub folds: Vec<FoldResult>,
}

/// Aligned trials with their spectrograms computed once up front.
pub struct Prepared {
    pub signals: Vec<Tensor>,
    pub spectrograms: Option<Vec<Tensor>>,
    pub labels: Vec<usize>,
}

impl Prepared {
    pub fn new(config: &BiteConfig, signals: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        let spectrograms = match config.ablation.use_frequency {
            true => {
                let plan = config.stft_plan()?;
                Some(
                    signals
                        .iter()
                        .map(|s| stft_magnitude(s, &plan).map(|sp| sp.values))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            false => None,
        };
        Ok(Self { signals, spectrograms, labels })
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let signals: Vec<&Tensor> = indices.iter().map(|&i| &self.signals[i]).collect();
        let stacked = Tensor::stack(&signals)?;
        let s = stacked.shape().to_vec();
        let signal = stacked.reshape([s[0], 1, s[1], s[2]])?;
        let spectrogram = match &self.spectrograms {
            Some(specs) => Some(Tensor::stack(&indices.iter().map(|&i| &specs[i]).collect::<Vec<_>>())?),
            None => None,
        };
        Ok(Batch { signal, spectrogram })
    }
}

/// Checks that `set` fits the input geometry of `config`.
pub fn check_compatible(config: &BiteConfig, set: &TrialSet) -> Result<()> {
    let mismatch = |field: &str, archived: String, expected: String| {
        Err(BiteError::ConfigMismatch { field: field.into(), archived, expected })
    };
    if set.channels() != config.channels {
        return mismatch("channels", config.channels.to_string(), set.channels().to_string());
    }
    if set.samples() != config.samples {
        return mismatch("samples", config.samples.to_string(), set.samples().to_string());
    }
    if set.n_classes != config.n_classes {
        return mismatch("n-classes", config.n_classes.to_string(), set.n_classes.to_string());
    }
    if (set.fs - config.fs).abs() > 1e-6 * config.fs {
        return mismatch("fs", config.fs.to_string(), set.fs.to_string());
    }
    Ok(())
}

/// Applies `alignment` to the trials at `indices`. `FitOnInput` fits one
/// alignment per subject over that subject's selected trials.
pub fn align_trials(set: &TrialSet, indices: &[usize], alignment: &Alignment) -> Result<Vec<Tensor>> {
    match alignment {
        Alignment::None => Ok(indices.iter().map(|&i| set.trials[i].signal.clone()).collect()),
        Alignment::Whitener(w) => {
            let state = AlignmentState { mean_cov: Tensor::identity(w.shape()[0]), whitener: w.clone(), fit_count: 0 };
            indices.iter().map(|&i| ea_apply(&state, &set.trials[i].signal)).collect()
        }
        Alignment::FitOnInput => {
            let mut states: Vec<(u16, AlignmentState)> = Vec::new();
            for subject in indices.iter().map(|&i| set.trials[i].subject) {
                if states.iter().all(|(s, _)| *s != subject) {
                    let own = indices.iter().filter(|&&i| set.trials[i].subject == subject);
                    states.push((subject, ea_fit(own.map(|&i| &set.trials[i].signal))?));
                }
            }
            indices
                .iter()
                .map(|&i| {
                    let t = &set.trials[i];
                    let (_, state) = states.iter().find(|(s, _)| *s == t.subject).expect("fitted above");
                    ea_apply(state, &t.signal)
                })
                .collect()
        }
    }
}

/// Eval-mode predictions over `data` in fixed-size chunks.
pub fn predict(model: &BiteModel, data: &Prepared) -> Result<Vec<usize>> {
    let order: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in order.chunks(EVAL_BATCH) {
        let logits = model.predict_logits(&data.batch(chunk)?)?;
        out.extend(metrics::argmax_rows(logits.data(), model.config().n_classes));
    }
    Ok(out)
}

/// Evaluates `model` on the trials at `indices`, one confusion per subject in
/// ascending id order.
pub fn evaluate(model: &BiteModel, alignment: &Alignment, set: &TrialSet, indices: &[usize]) -> Result<Vec<(u16, Confusion)>> {
    check_compatible(model.config(), set)?;
    let signals = align_trials(set, indices, alignment)?;
    let labels: Vec<usize> = indices.iter().map(|&i| set.trials[i].label).collect();
    let data = Prepared::new(model.config(), signals, labels)?;
    let predicted = predict(model, &data)?;
    let mut subjects: Vec<u16> = indices.iter().map(|&i| set.trials[i].subject).collect();
    subjects.sort_unstable();
    subjects.dedup();
    subjects
        .into_iter()
        .map(|id| {
            let (truth, pred): (Vec<usize>, Vec<usize>) = indices
                .iter()
                .zip(&predicted)
                .filter(|(&i, _)| set.trials[i].subject == id)
                .map(|(&i, &p)| (set.trials[i].label, p))
                .unzip();
            Ok((id, metrics::confusion(&truth, &pred, set.n_classes)?))
        })
        .collect()
}

/// Mini-batch training of `model` on `data` for `epochs` epochs.
pub fn fit(
    model: &mut BiteModel,
    data: &Prepared,
    train: &TrainConfig,
    epochs: usize,
    fold_index: u64,
    fold_id: u16,
) -> Result<Vec<EpochLog>> {
    let mut shuffle_rng = stream_rng(train.seed, Stream::Shuffle, fold_index);
    let mut dropout_rng = stream_rng(train.seed, Stream::Dropout, fold_index);
    let mut adam = Adam::for_params(train.adam(), model.params());
    let k = model.config().n_classes;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        if train.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(train.batch_size).enumerate() {
            let batch = data.batch(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut graph = Graph::new();
            let (mut s, logits) =
                model.forward_batch(&mut graph, &batch, Mode::Train, Some(&mut dropout_rng as &mut dyn RngCore))?;
            let loss = s.graph.cross_entropy(logits, &labels)?;
            let value = s.graph.value(loss).item()?;
            if !value.is_finite() {
                return Err(BiteError::NonFiniteLoss { epoch, batch: b + 1, value });
            }
            let predicted = metrics::argmax_rows(s.graph.value(logits).data(), k);
            correct += predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
            loss_sum += value * chunk.len() as f64;
            s.graph.backward(loss)?;
            model.zero_grad();
            model.accumulate_grads(&s);
            model.update_running_stats(&mut s);
            adam.step_params(model.params_mut())?;
        }
        logs.push(EpochLog {
            fold: fold_id,
            epoch,
            loss: loss_sum / data.len() as f64,
            acc: correct as f64 / data.len() as f64,
        });
    }
    Ok(logs)
}

fn run_fold(
    config: &BiteConfig,
    train: &TrainConfig,
    set: &TrialSet,
    protocol: Protocol,
    fold_index: usize,
    fold: Fold,
) -> Result<FoldResult> {
    let alignment = match (train.align, protocol) {
        (false, _) => Alignment::None,
        (true, Protocol::Loso) => Alignment::FitOnInput,
        (true, Protocol::WithinSubject) => {
            Alignment::Whitener(ea_fit(fold.train.iter().map(|&i| &set.trials[i].signal))?.whitener)
        }
    };
    // LOSO training subjects are each aligned on their own trials.
    let signals = align_trials(set, &fold.train, &alignment)?;
    let labels = fold.train.iter().map(|&i| set.trials[i].label).collect();
    let data = Prepared::new(config, signals, labels)?;
    let mut init_rng = stream_rng(train.seed, Stream::Init, fold_index as u64);
    let mut model = BiteModel::new(config.clone(), &mut init_rng)?;
    let epochs = fit(&mut model, &data, train, train.epochs_for(protocol), fold_index as u64, fold.subject)?;
    let per_subject = evaluate(&model, &alignment, set, &fold.test)?;
    let mut confusion = vec![vec![0; set.n_classes]; set.n_classes];
    for (_, m) in &per_subject {
        metrics::add_confusion(&mut confusion, m);
    }
    Ok(FoldResult { fold, model, alignment, confusion, epochs })
}

pub fn make_folds(set: &TrialSet, protocol: Protocol, train: &TrainConfig) -> Result<Vec<Fold>> {
    match protocol {
        Protocol::WithinSubject => split_within_subject(set, train.train_ratio, train.seed),
        Protocol::Loso => split_loso(set),
    }
}

/// Splits `set` by `protocol`, trains one model per fold from the seed, and
/// reports test metrics per subject. Folds run in parallel; results are
/// merged in fold order.
pub fn train_and_eval(config: &BiteConfig, train: &TrainConfig, set: &TrialSet, protocol: Protocol) -> Result<TrainOutcome> {
    config.validate()?;
    train.validate()?;
    set.validate()?;
    check_compatible(config, set)?;
    let folds = make_folds(set, protocol, train)?;
    let results = folds
        .into_par_iter()
        .enumerate()
        .map(|(i, fold)| run_fold(config, train, set, protocol, i, fold))
        .collect::<Result<Vec<_>>>()?;
    let subjects: Vec<(u16, Confusion)> = results.iter().map(|r| (r.fold.subject, r.confusion.clone())).collect();
    let report = EvalReport::from_subjects(&subjects, train.population_std)?;
    Ok(TrainOutcome { report, folds: results })
}
