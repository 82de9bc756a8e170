//! Optimization, evaluation protocols and metrics.

mod harness;
pub mod metrics;
mod optim;
mod split;
mod sweep;

pub use harness::{
    align_trials, check_compatible, evaluate, fit, make_folds, predict, train_and_eval, EpochLog, EvalReport,
    FoldResult, Prepared, Protocol, SubjectScore, TrainConfig, TrainOutcome,
};
pub use metrics::{accuracy, confusion, kappa, Confusion};
pub use optim::{Adam, AdamConfig};
pub use split::{split_loso, split_within_subject, Fold};
pub use sweep::{hyper_sweep, RowAverage, SweepCell, SweepTable, DEFAULT_DROPOUTS, DEFAULT_KERNELS};
