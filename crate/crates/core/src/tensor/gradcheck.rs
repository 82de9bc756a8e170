use super::{Graph, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: Option<usize>,
    pub elements: usize,
    pub pass: bool,
}

impl GradCheckReport {
    fn failed() -> Self {
        Self {
            max_rel_error: f64::INFINITY,
            max_abs_error: f64::INFINITY,
            worst_index: None,
            elements: 0,
            pass: false,
        }
    }

    /// Combines two reports as if they covered one concatenated input.
    pub fn merge(self, other: GradCheckReport, tol: f64) -> GradCheckReport {
        let (max_rel_error, worst_index) = if other.max_rel_error > self.max_rel_error {
            (other.max_rel_error, other.worst_index.map(|i| i + self.elements))
        } else {
            (self.max_rel_error, self.worst_index)
        };
        GradCheckReport {
            max_rel_error,
            max_abs_error: self.max_abs_error.max(other.max_abs_error),
            worst_index,
            elements: self.elements + other.elements,
            pass: self.pass && other.pass && max_rel_error < tol,
        }
    }
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks the gradient of the scalar function `f` at `x`.
///
/// `f` receives a fresh graph and the variable holding `x` and must return a
/// one-element variable. It has to be deterministic (dropout off).
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_with(Graph::new, f, x, eps, tol)
}

/// As [`finite_diff_check`], building each analytic-pass graph with
/// `make_graph` (used to inject faults).
pub fn finite_diff_check_with<G, F>(make_graph: G, f: F, x: &Tensor, eps: f64, tol: f64) -> GradCheckReport
where
    G: Fn() -> Graph,
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = make_graph();
        let xv = g.param(x.clone());
        let Ok(y) = f(&mut g, xv) else { return GradCheckReport::failed() };
        if g.backward(y).is_err() {
            return GradCheckReport::failed();
        }
        g.grad(xv)
    };
    let eval = |t: Tensor| -> Option<f64> {
        let mut g = Graph::new();
        let xv = g.param(t);
        let y = f(&mut g, xv).ok()?;
        g.value(y).item().ok()
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: None,
        elements: x.len(),
        pass: true,
    };
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (Some(fp), Some(fm)) = (eval(plus), eval(minus)) else {
            return GradCheckReport::failed();
        };
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = relative_error(a, numeric);
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst_index = Some(i);
        }
    }
    report.pass = report.max_rel_error < tol;
    report
}
