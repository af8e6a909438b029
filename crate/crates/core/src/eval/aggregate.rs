use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::RunResult;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    /// Population standard deviation (ddof = 0).
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl MetricStat {
    pub fn from_values(values: &[f64]) -> Option<MetricStat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(MetricStat {
            // summation error can push the mean a hair outside [min, max]
            mean: mean.clamp(min, max),
            std: var.sqrt(),
            min,
            max,
            n: values.len(),
        })
    }

    /// `"0.79 ± 0.01"`: both values rounded to two decimals.
    pub fn display(&self) -> String {
        format_mean_std(self.mean, self.std)
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", round2(mean), round2(std))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, MetricStat>,
    pub runs: usize,
    pub failed: usize,
    /// Some runs failed or did not produce every metric.
    pub partial: bool,
}

impl MetricReport {
    pub fn get(&self, metric: &str) -> Option<&MetricStat> {
        self.metrics.get(metric)
    }
}

pub fn aggregate(results: &[RunResult]) -> Result<MetricReport> {
    aggregate_with_failures(results, 0)
}

/// Mean and population std per metric over the completed runs; `failed`
/// runs mark the report partial.
pub fn aggregate_with_failures(results: &[RunResult], failed: usize) -> Result<MetricReport> {
    if results.is_empty() {
        return Err(Error::Argument("nothing to aggregate".into()));
    }
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in results {
        for (k, v) in &r.metrics {
            values.entry(k.as_str()).or_default().push(*v);
        }
    }
    let metrics: BTreeMap<String, MetricStat> = values
        .into_iter()
        .filter_map(|(k, v)| MetricStat::from_values(&v).map(|s| (k.to_string(), s)))
        .collect();
    let incomplete = metrics.values().any(|s| s.n != results.len());
    Ok(MetricReport {
        metrics,
        runs: results.len(),
        failed,
        partial: failed > 0 || incomplete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(auc: f64) -> RunResult {
        RunResult {
            strategy: "s".into(),
            dataset: "d".into(),
            seed: 0,
            scores: vec![],
            metrics: BTreeMap::from([("auc_roc".to_string(), auc)]),
        }
    }

    #[test]
    fn five_run_example() {
        let runs: Vec<_> = [0.80, 0.78, 0.79, 0.81, 0.77].map(run).to_vec();
        let r = aggregate(&runs).unwrap();
        let s = r.get("auc_roc").unwrap();
        assert!((s.mean - 0.79).abs() < 1e-12);
        assert!((s.std - 0.0002f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.display(), "0.79 ± 0.01");
        assert!(!r.partial);
    }

    #[test]
    fn single_and_equal_runs_have_zero_std() {
        assert_eq!(aggregate(&[run(0.7)]).unwrap().get("auc_roc").unwrap().std, 0.0);
        assert_eq!(
            aggregate(&[run(0.7), run(0.7)]).unwrap().get("auc_roc").unwrap().std,
            0.0
        );
        assert!(aggregate(&[]).is_err());
        assert!(aggregate_with_failures(&[run(0.7)], 1).unwrap().partial);
    }
}
