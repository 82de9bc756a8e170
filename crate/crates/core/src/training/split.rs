//! Train/test partitions.

use rand::seq::SliceRandom;

use crate::data::TrialSet;
use crate::error::{BiteError, Result};
use crate::rng::{stream_rng, Stream};

/// Index sets into a [`TrialSet`]. `subject` is the subject trained and tested
/// on (within-subject) or held out (LOSO).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub subject: u16,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn is_test_tag(tag: &str) -> bool {
    matches!(tag.to_ascii_lowercase().as_str(), "test" | "eval" | "e")
}

/// One fold per subject. A subject whose trials carry at least two distinct
/// session tags is split by session: sessions tagged `test`, `eval` or `e`
/// form the test set, or failing that the last session to appear. Other
/// subjects get a class-stratified shuffle with `ratio` of each class in
/// training.
pub fn split_within_subject(set: &TrialSet, ratio: f64, seed: u64) -> Result<Vec<Fold>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(BiteError::config(format!("train ratio must lie in (0, 1), got {ratio}")));
    }
    set.subjects()
        .into_iter()
        .map(|subject| {
            let idx: Vec<usize> = (0..set.len()).filter(|&i| set.trials[i].subject == subject).collect();
            let mut sessions: Vec<Option<&str>> = Vec::new();
            for &i in &idx {
                let s = set.trials[i].session.as_deref();
                if !sessions.contains(&s) {
                    sessions.push(s);
                }
            }
            let fold = if sessions.len() >= 2 {
                let mut test_sessions: Vec<Option<&str>> =
                    sessions.iter().copied().filter(|s| s.is_some_and(is_test_tag)).collect();
                if test_sessions.is_empty() || test_sessions.len() == sessions.len() {
                    test_sessions = vec![*sessions.last().expect("two sessions")];
                }
                let (test, train) = idx
                    .iter()
                    .partition(|&&i| test_sessions.contains(&set.trials[i].session.as_deref()));
                Fold { subject, train, test }
            } else {
                stratified(set, subject, &idx, ratio, seed)?
            };
            check_fold(set, &fold)?;
            Ok(fold)
        })
        .collect()
}

fn stratified(set: &TrialSet, subject: u16, idx: &[usize], ratio: f64, seed: u64) -> Result<Fold> {
    let mut rng = stream_rng(seed, Stream::Split, subject as u64);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 0..set.n_classes {
        let mut members: Vec<usize> = idx.iter().copied().filter(|&i| set.trials[i].label == class).collect();
        members.shuffle(&mut rng);
        let n_train = (ratio * members.len() as f64).round() as usize;
        test.extend_from_slice(&members[n_train..]);
        train.extend_from_slice(&members[..n_train]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Fold { subject, train, test })
}

fn check_fold(set: &TrialSet, fold: &Fold) -> Result<()> {
    if fold.test.is_empty() {
        return Err(BiteError::Split(format!(
            "subject {} has too few trials to hold any out for testing",
            fold.subject
        )));
    }
    let all = fold.train.iter().chain(&fold.test);
    for label in all.map(|&i| set.trials[i].label) {
        if !fold.train.iter().any(|&i| set.trials[i].label == label) {
            return Err(BiteError::Split(format!(
                "class {label} of subject {} is absent from its training partition",
                fold.subject
            )));
        }
    }
    Ok(())
}

/// One fold per subject in ascending id order, testing on that subject and
/// training on all others.
pub fn split_loso(set: &TrialSet) -> Result<Vec<Fold>> {
    let subjects = set.subjects();
    if subjects.len() < 2 {
        return Err(BiteError::Split(format!(
            "leave-one-subject-out needs at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    Ok(subjects
        .into_iter()
        .map(|subject| {
            let (test, train) = (0..set.len()).partition(|&i| set.trials[i].subject == subject);
            Fold { subject, train, test }
        })
        .collect())
}
