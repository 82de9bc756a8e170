use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{BiteError, Result};
use crate::tensor::Tensor;

/// Eigenvalues of the mean covariance are clamped to at least this value
/// before the inverse square root.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Reference-space statistics for Euclidean Alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentState {
    /// `R̄ = (1/n) Σ X Xᵀ`, `[C, C]`.
    pub mean_cov: Tensor,
    /// `R̄^{-1/2}`, `[C, C]`.
    pub whitener: Tensor,
    pub fit_count: usize,
}

impl AlignmentState {
    /// A no-op alignment for `channels` channels.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean_cov: Tensor::identity(channels),
            whitener: Tensor::identity(channels),
            fit_count: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.whitener.shape()[0]
    }
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    Tensor::from_fn([r, c], |i| m[(i / c, i % c)])
}

/// Fits the alignment on a set of `[C, T]` trials.
pub fn ea_fit<'a, I>(trials: I) -> Result<AlignmentState>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let mut sum: Option<DMatrix<f64>> = None;
    let mut count = 0usize;
    for trial in trials {
        if trial.ndim() != 2 {
            return Err(BiteError::shape(format!(
                "alignment expects [C, T] trials, got {:?}",
                trial.shape()
            )));
        }
        let x = to_matrix(trial);
        let cov = &x * x.transpose();
        match &mut sum {
            Some(s) if s.nrows() != cov.nrows() => {
                return Err(BiteError::shape(format!(
                    "inconsistent channel counts in alignment fit: {} vs {}",
                    s.nrows(),
                    cov.nrows()
                )));
            }
            Some(s) => *s += cov,
            None => sum = Some(cov),
        }
        count += 1;
    }
    let sum = sum.ok_or_else(|| BiteError::config("alignment needs at least one trial"))?;
    let mut mean = sum / count as f64;
    // symmetrize away rounding before the eigensolver
    mean = (&mean + mean.transpose()) * 0.5;
    let eig = SymmetricEigen::new(mean.clone());
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.max(EIGEN_FLOOR).sqrt());
    let q = &eig.eigenvectors;
    let mut whitener = q * DMatrix::from_diagonal(&inv_sqrt) * q.transpose();
    whitener = (&whitener + whitener.transpose()) * 0.5;
    Ok(AlignmentState {
        mean_cov: from_matrix(&mean),
        whitener: from_matrix(&whitener),
        fit_count: count,
    })
}

/// `whitener · trial`.
pub fn ea_apply(state: &AlignmentState, trial: &Tensor) -> Result<Tensor> {
    if trial.ndim() != 2 || trial.shape()[0] != state.channels() {
        return Err(BiteError::shape(format!(
            "alignment fitted on {} channels cannot be applied to a {:?} trial",
            state.channels(),
            trial.shape()
        )));
    }
    crate::tensor::kernels::matmul(&state.whitener, trial)
}
