//! Accuracy plus macro-averaged sensitivity, specificity and F1.
//!
//! Macro averages run over the classes that occur in either `labels` or
//! `preds`:
//! - SEN averages recall over classes with at least one true sample.
//! - SPE averages TN/(TN+FP) over classes with at least one negative
//!   sample, and is 1 when no class has one.
//! - F1 averages per-class F1. A zero-denominator precision or recall
//!   counts as 0.

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub spe: f64,
    pub sen: f64,
    pub f1: f64,
}

impl Metrics {
    pub const PERFECT: Metrics = Metrics {
        acc: 1.0,
        spe: 1.0,
        sen: 1.0,
        f1: 1.0,
    };

    pub fn as_array(&self) -> [f64; 4] {
        [self.acc, self.spe, self.sen, self.f1]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            acc: a[0],
            spe: a[1],
            sen: a[2],
            f1: a[3],
        }
    }
}

/// `matrix[true][pred]` counts.
pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<Vec<Vec<u64>>, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &t) in preds.iter().zip(labels) {
        let bad = if p >= n_classes { Some(p) } else if t >= n_classes { Some(t) } else { None };
        if let Some(index) = bad {
            return Err(EvalError::LabelOutOfRange { index, n_classes });
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn compute_metrics(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Metrics, EvalError> {
    let m = confusion_matrix(preds, labels, n_classes)?;
    let total: u64 = preds.len() as u64;
    let correct: u64 = (0..n_classes).map(|c| m[c][c]).sum();

    let mut sen = (0.0, 0usize);
    let mut spe = (0.0, 0usize);
    let mut f1 = (0.0, 0usize);
    for c in 0..n_classes {
        let tp = m[c][c];
        let support: u64 = m[c].iter().sum();
        let predicted: u64 = (0..n_classes).map(|t| m[t][c]).sum();
        if support == 0 && predicted == 0 {
            continue;
        }
        let fn_ = support - tp;
        let fp = predicted - tp;
        let negatives = total - support;
        let tn = negatives - fp;

        let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
        if support > 0 {
            sen.0 += recall;
            sen.1 += 1;
        }
        if negatives > 0 {
            spe.0 += tn as f64 / negatives as f64;
            spe.1 += 1;
        }
        let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let class_f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        debug_assert_eq!(tp + fn_ + fp + tn, total);
        f1.0 += class_f1;
        f1.1 += 1;
    }
    let mean = |(s, n): (f64, usize), empty: f64| if n == 0 { empty } else { s / n as f64 };
    Ok(Metrics {
        acc: correct as f64 / total as f64,
        sen: mean(sen, 0.0),
        spe: mean(spe, 1.0),
        f1: mean(f1, 0.0),
    })
}
