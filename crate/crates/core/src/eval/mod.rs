//! AUC-ROC, support-weighted metrics and run aggregation.

mod aggregate;
mod auc;
mod weighted;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use aggregate::{aggregate, aggregate_with_failures, format_mean_std, round2, MetricReport, MetricStat};
pub use auc::{auc_roc, auc_roc_multilabel, auc_roc_multilabel_detail, auc_roc_pairwise, MultilabelAuc};
pub use weighted::{class_counts, threshold, weighted_metrics, ClassCounts, MetricTask, WeightedMetrics, METRIC_NAMES};

use crate::data::{Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::zoo::{ModelGraph, OutputActivation};

pub const AUC_ROC: &str = "auc_roc";

/// One trained-and-evaluated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: String,
    pub dataset: String,
    pub seed: u64,
    /// Test-set probabilities, row-major `[items, outputs]`.
    pub scores: Vec<f32>,
    /// `auc_roc` is absent when the test labels hold a single class.
    pub metrics: BTreeMap<String, f64>,
}

impl RunResult {
    pub fn score_digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.scores {
            h.update(s.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Scores every metric for probabilities `probs` (`[items, outputs]`).
pub fn score_predictions(
    probs: &[f32],
    data: &Dataset,
    indices: &[usize],
    output_dim: usize,
    activation: OutputActivation,
) -> Result<BTreeMap<String, f64>> {
    let targets = data.targets(indices, output_dim)?;
    let actual: Vec<bool> = targets.iter().map(|&t| t > 0.5).collect();
    let mut metrics = BTreeMap::new();
    let (task, auc) = match (data.task_kind(), output_dim) {
        (TaskKind::Binary, 1) => {
            let s: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
            (MetricTask::Binary, auc_roc(&s, &actual))
        }
        (TaskKind::Binary, _) => {
            let s: Vec<f64> = probs.chunks(output_dim).map(|r| r[1] as f64).collect();
            let l: Vec<bool> = actual.chunks(output_dim).map(|r| r[1]).collect();
            (MetricTask::Multiclass, auc_roc(&s, &l))
        }
        (TaskKind::Multilabel, k) => {
            let s: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
            let task = if activation == OutputActivation::Softmax
                && actual.chunks(k).all(|r| r.iter().filter(|v| **v).count() == 1)
            {
                MetricTask::Multiclass
            } else {
                MetricTask::Multilabel
            };
            (task, auc_roc_multilabel(&s, &actual, k))
        }
    };
    match auc {
        Ok(v) => {
            metrics.insert(AUC_ROC.to_string(), v);
        }
        Err(Error::UndefinedMetric(msg)) => log::warn!("{}: AUC-ROC not reported ({msg})", data.name()),
        Err(e) => return Err(e),
    }
    let predicted = threshold(probs, output_dim, task);
    let w = weighted_metrics(&predicted, &actual, output_dim, task)?;
    metrics.extend(w.to_map());
    Ok(metrics)
}

/// Evaluates `model` on `indices` of `data`.
pub fn evaluate(model: &ModelGraph, data: &Dataset, indices: &[usize], strategy: &str, seed: u64) -> Result<RunResult> {
    let head = model.require_head()?;
    let probs = crate::train::predict(model, data, indices, 64)?;
    let metrics = score_predictions(&probs, data, indices, head.output_dim, head.activation)?;
    Ok(RunResult {
        strategy: strategy.to_string(),
        dataset: data.name().to_string(),
        seed,
        scores: probs,
        metrics,
    })
}
