//! Confusion matrix and one-vs-rest classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{Float, Tensor};

/// Counts indexed `[true class][predicted class]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_pairs(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        ensure!(
            truth.len() == predicted.len(),
            Shape,
            "{} labels but {} predictions",
            truth.len(),
            predicted.len()
        );
        let mut m = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.add(t, p)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        ensure!(
            truth < self.classes && predicted < self.classes,
            InvalidArgument,
            "class pair ({truth}, {predicted}) outside 0..{}",
            self.classes
        );
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// `(tp, fp, fn, tn)` of `class` against all others.
    pub fn one_vs_rest(&self, class: usize) -> (u64, u64, u64, u64) {
        let tp = self.get(class, class);
        let predicted: u64 = (0..self.classes).map(|t| self.get(t, class)).sum();
        let actual: u64 = (0..self.classes).map(|p| self.get(class, p)).sum();
        let fp = predicted - tp;
        let fn_ = actual - tp;
        (tp, fp, fn_, self.total() - tp - fp - fn_)
    }

    /// Header row of predicted classes, then one row per true class.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let name = |i: usize| names.get(i).map_or_else(|| i.to_string(), |s| s.to_string());
        let mut out = String::from("true\\predicted");
        for p in 0..self.classes {
            out.push(',');
            out.push_str(&name(p));
        }
        out.push('\n');
        for t in 0..self.classes {
            out.push_str(&name(t));
            for p in 0..self.classes {
                out.push_str(&format!(",{}", self.get(t, p)));
            }
            out.push('\n');
        }
        out
    }

    pub fn metrics(&self) -> Metrics {
        let total = self.total();
        let per_class: Vec<ClassMetrics> = (0..self.classes)
            .map(|c| {
                let (tp, fp, fn_, _) = self.one_vs_rest(c);
                let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
                ClassMetrics {
                    precision: ratio(tp, tp + fp),
                    recall: ratio(tp, tp + fn_),
                    f1: ratio(2 * tp, 2 * tp + fp + fn_),
                    support: tp + fn_,
                    no_predictions: tp + fp == 0,
                    no_support: tp + fn_ == 0,
                }
            })
            .collect();
        let n = self.classes.max(1) as f64;
        Metrics {
            accuracy: if total == 0 {
                0.0
            } else {
                self.trace() as f64 / total as f64
            },
            macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / n,
            macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / n,
            macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / n,
            per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Precision was defined as 0 because nothing was predicted as this class.
    pub no_predictions: bool,
    /// Recall was defined as 0 because the class has no samples.
    pub no_support: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Row-wise argmax of `[N, C]` logits; ties go to the lowest index.
pub fn argmax_rows<T: Float>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    ensure!(
        logits.rank() == 2,
        Shape,
        "expected [N, C] logits, got {:?}",
        logits.shape()
    );
    let c = logits.shape()[1];
    ensure!(c > 0, Shape, "logits have no classes");
    Ok(logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
