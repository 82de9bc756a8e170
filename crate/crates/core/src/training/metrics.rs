//! Confusion matrices, accuracy and Cohen's kappa.

use crate::error::{BiteError, Result};

/// Rows are true classes, columns predictions.
pub type Confusion = Vec<Vec<u64>>;

pub fn confusion(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Confusion> {
    if truth.len() != predicted.len() {
        return Err(BiteError::shape(format!(
            "{} labels against {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= n_classes || p >= n_classes {
            return Err(BiteError::config(format!("class ({t}, {p}) out of range for {n_classes} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn total(m: &Confusion) -> Result<u64> {
    if m.iter().any(|row| row.len() != m.len()) {
        return Err(BiteError::shape("confusion matrix must be square"));
    }
    let n: u64 = m.iter().flatten().sum();
    if n == 0 {
        return Err(BiteError::config("confusion matrix is empty"));
    }
    Ok(n)
}

pub fn accuracy(m: &Confusion) -> Result<f64> {
    let n = total(m)?;
    let trace: u64 = (0..m.len()).map(|k| m[k][k]).sum();
    Ok(trace as f64 / n as f64)
}

/// `(p_o - p_e) / (1 - p_e)`; zero when chance agreement is already total.
pub fn kappa(m: &Confusion) -> Result<f64> {
    let n = total(m)? as f64;
    let k = m.len();
    let p_o = (0..k).map(|i| m[i][i]).sum::<u64>() as f64 / n;
    let p_e = (0..k)
        .map(|i| {
            let row: u64 = m[i].iter().sum();
            let col: u64 = m.iter().map(|r| r[i]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if p_e == 1.0 {
        return Ok(0.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

pub fn add_confusion(acc: &mut Confusion, other: &Confusion) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Mean and standard deviation; `population` divides by `n`, otherwise by
/// `n - 1` (zero for a single value either way).
pub fn mean_std(values: &[f64], population: bool) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let denom = if population { n } else { n.saturating_sub(1) };
    let std = if denom == 0 { 0.0 } else { (ss / denom as f64).sqrt() };
    (mean, std)
}

/// Index of the largest entry of each row of a row-major `[rows, k]` buffer;
/// ties go to the lower index.
pub fn argmax_rows(data: &[f64], k: usize) -> Vec<usize> {
    data.chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_degenerate() {
        let diag = vec![vec![5, 0], vec![0, 5]];
        assert_eq!(kappa(&diag).unwrap(), 1.0);
        let one_class = vec![vec![5, 0], vec![5, 0]];
        assert_eq!(accuracy(&one_class).unwrap(), 0.5);
        assert_eq!(kappa(&one_class).unwrap(), 0.0);
        let all_same = vec![vec![4, 0], vec![0, 0]];
        assert_eq!(kappa(&all_same).unwrap(), 0.0);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(kappa(&vec![vec![0, 0], vec![0, 0]]).is_err());
        assert!(accuracy(&vec![]).is_err());
    }

    #[test]
    fn confusion_counts() {
        let m = confusion(&[0, 1, 1, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![0, 1, 1], vec![0, 0, 1]]);
        assert!(confusion(&[0], &[3], 3).is_err());
    }

    #[test]
    fn std_conventions() {
        let (m, s) = mean_std(&[1.0, 3.0], true);
        assert_eq!((m, s), (2.0, 1.0));
        assert!((mean_std(&[1.0, 3.0], false).1 - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_take_first() {
        assert_eq!(argmax_rows(&[1.0, 1.0, 0.0, 0.0, 2.0, 2.0], 3), vec![0, 1]);
    }
}
