use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricTask {
    /// One column: the positive-class indicator. Both classes are scored.
    Binary,
    /// One column per label; each label's positive class is scored.
    Multilabel,
    /// One-hot rows, one column per class.
    Multiclass,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> BigRational {
    if den == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
}

impl ClassCounts {
    pub fn precision(&self) -> BigRational {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> BigRational {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR / (P + R)`, written as `2TP / (2TP + FP + FN)`.
    pub fn f_score(&self) -> BigRational {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

/// Support-weighted averages, kept as exact fractions.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedMetrics {
    pub per_class: Vec<ClassCounts>,
    pub precision_w: BigRational,
    pub recall_w: BigRational,
    pub f_score_w: BigRational,
    /// Support-weighted recall; plain accuracy for single-label data.
    pub accuracy_w: BigRational,
}

pub const METRIC_NAMES: [&str; 4] = ["accuracy_w", "f_score_w", "precision_w", "recall_w"];

impl WeightedMetrics {
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        let f = |r: &BigRational| r.to_f64().unwrap_or(f64::NAN);
        BTreeMap::from([
            ("accuracy_w".to_string(), f(&self.accuracy_w)),
            ("f_score_w".to_string(), f(&self.f_score_w)),
            ("precision_w".to_string(), f(&self.precision_w)),
            ("recall_w".to_string(), f(&self.recall_w)),
        ])
    }
}

pub fn class_counts(predicted: &[bool], actual: &[bool], k: usize, task: MetricTask) -> Result<Vec<ClassCounts>> {
    if predicted.is_empty() {
        return Err(Error::Argument("empty test set".into()));
    }
    if k == 0 || predicted.len() != actual.len() || !predicted.len().is_multiple_of(k) {
        return Err(Error::Argument(format!(
            "prediction ({}) and label ({}) matrices do not have {k} columns",
            predicted.len(),
            actual.len()
        )));
    }
    let rows = predicted.len() / k;
    let column = |p: &[bool], a: &[bool], c: usize, kk: usize| {
        let mut cc = ClassCounts::default();
        for r in 0..rows {
            match (p[r * kk + c], a[r * kk + c]) {
                (true, true) => cc.tp += 1,
                (true, false) => cc.fp += 1,
                (false, true) => cc.fn_ += 1,
                (false, false) => {}
            }
            cc.support += a[r * kk + c] as u64;
        }
        cc
    };
    match task {
        MetricTask::Binary => {
            if k != 1 {
                return Err(Error::Argument(format!("binary metrics take one column, got {k}")));
            }
            let p2: Vec<bool> = predicted.iter().flat_map(|&v| [!v, v]).collect();
            let a2: Vec<bool> = actual.iter().flat_map(|&v| [!v, v]).collect();
            Ok((0..2).map(|c| column(&p2, &a2, c, 2)).collect())
        }
        MetricTask::Multiclass => {
            for m in [predicted, actual] {
                if m.chunks(k).any(|row| row.iter().filter(|v| **v).count() != 1) {
                    return Err(Error::Argument("multiclass rows must be one-hot".into()));
                }
            }
            Ok((0..k).map(|c| column(predicted, actual, c, k)).collect())
        }
        MetricTask::Multilabel => Ok((0..k).map(|c| column(predicted, actual, c, k)).collect()),
    }
}

/// Per-class precision, recall and F-score averaged with class support as
/// weights. Zero denominators count as 0.
pub fn weighted_metrics(predicted: &[bool], actual: &[bool], k: usize, task: MetricTask) -> Result<WeightedMetrics> {
    let per_class = class_counts(predicted, actual, k, task)?;
    let total: u64 = per_class.iter().map(|c| c.support).sum();
    if total == 0 {
        return Err(Error::UndefinedMetric("no class has any support".into()));
    }
    let weighted = |f: fn(&ClassCounts) -> BigRational| {
        let sum = per_class.iter().fold(BigRational::zero(), |acc, c| {
            acc + f(c) * BigRational::from_integer(BigInt::from(c.support))
        });
        sum / BigRational::from_integer(BigInt::from(total))
    };
    let recall_w = weighted(ClassCounts::recall);
    Ok(WeightedMetrics {
        precision_w: weighted(ClassCounts::precision),
        f_score_w: weighted(ClassCounts::f_score),
        accuracy_w: recall_w.clone(),
        recall_w,
        per_class,
    })
}

/// Decision rule: per-column `p >= 0.5`, or argmax for multiclass.
pub fn threshold(probs: &[f32], k: usize, task: MetricTask) -> Vec<bool> {
    match task {
        MetricTask::Multiclass => probs
            .chunks(k)
            .flat_map(|row| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
                (0..k).map(move |i| i == best)
            })
            .collect(),
        _ => probs.iter().map(|&p| p >= 0.5).collect(),
    }
}
