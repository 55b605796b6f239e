//! Confusion matrix and unweighted (macro) classification metrics.
//!
//! Per-class precision, recall and F1 use 0 for an empty denominator.
//! Macro averages (UF1, UAR) run over the classes that occur in the ground
//! truth or in the predictions, so a fold that lacks a class entirely does
//! not score it as a zero.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<u64>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub uf1: f64,
    pub uar: f64,
    pub acc: f64,
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if truth.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ground-truth labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut c = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {} outside {classes} classes",
                t.max(p)
            )));
        }
        c[t][p] += 1;
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn report_from_confusion(confusion: Vec<Vec<u64>>, labels: Vec<String>) -> Result<EvalReport> {
    let n = confusion.len();
    if labels.len() != n || confusion.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidArgument(
            "confusion matrix must be square and match the labels".into(),
        ));
    }
    let row: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<u64> = (0..n).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
    let diag: Vec<u64> = (0..n).map(|i| confusion[i][i]).collect();
    let total: u64 = row.iter().sum();
    let precision: Vec<f64> = (0..n).map(|i| ratio(diag[i], col[i])).collect();
    let recall: Vec<f64> = (0..n).map(|i| ratio(diag[i], row[i])).collect();
    let f1: Vec<f64> = (0..n).map(|i| ratio(2 * diag[i], row[i] + col[i])).collect();
    let present: Vec<usize> = (0..n).filter(|&i| row[i] + col[i] > 0).collect();
    let mean = |xs: &[f64]| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|&i| xs[i]).sum::<f64>() / present.len() as f64
        }
    };
    Ok(EvalReport {
        uf1: mean(&f1),
        uar: mean(&recall),
        acc: ratio(diag.iter().sum(), total),
        labels,
        confusion,
        precision,
        recall,
        f1,
    })
}

pub fn evaluate_predictions(truth: &[usize], pred: &[usize], labels: &[String]) -> Result<EvalReport> {
    let c = confusion_matrix(truth, pred, labels.len())?;
    report_from_confusion(c, labels.to_vec())
}

impl EvalReport {
    /// Confusion matrix as CSV: header `truth\pred,<labels>`, one row per
    /// true class.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("truth\\pred");
        for l in &self.labels {
            write!(out, ",{l}").unwrap();
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.confusion) {
            out.push_str(l);
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("UF1={:.4} UAR={:.4} ACC={:.4}\n", self.uf1, self.uar, self.acc);
        for (i, l) in self.labels.iter().enumerate() {
            writeln!(
                out,
                "  {l}: precision={:.4} recall={:.4} f1={:.4}",
                self.precision[i], self.recall[i], self.f1[i]
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn hand_case() {
        let r = report_from_confusion(vec![vec![5, 5], vec![0, 10]], names(2)).unwrap();
        assert_eq!(r.uar, 0.75);
        assert!((r.uf1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert_eq!(r.acc, 0.75);
    }

    #[test]
    fn perfect_predictions() {
        let truth = [0, 0, 0, 1, 2, 2];
        let r = evaluate_predictions(&truth, &truth, &names(4)).unwrap();
        assert_eq!((r.uf1, r.uar, r.acc), (1.0, 1.0, 1.0));
    }

    #[test]
    fn csv_layout() {
        let r = report_from_confusion(vec![vec![1, 2], vec![3, 4]], vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(r.confusion_csv(), "truth\\pred,a,b\na,1,2\nb,3,4\n");
    }
}
