//! Grid expansion and stable cell keys.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::ExperimentSpec;
use crate::error::{Error, Result};
use crate::transfer::{StrategyConfig, StrategyMode};
use crate::zoo::Family;

/// One cell of an experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellJob {
    pub key: String,
    pub dataset: String,
    pub backbone: Family,
    pub strategy: StrategyMode,
    pub upstream: Option<String>,
    /// Training fraction of a low-data cell; `None` trains on the full split.
    pub fraction: Option<f64>,
}

/// `dataset:backbone:strategy:upstream:fraction`, with `-` for no upstream
/// and `full` for no fraction.
pub fn cell_key(
    dataset: &str,
    backbone: Family,
    strategy: StrategyMode,
    upstream: Option<&str>,
    fraction: Option<f64>,
) -> String {
    let frac = fraction.map_or_else(|| "full".to_string(), |f| format!("{f}"));
    format!("{dataset}:{backbone}:{strategy}:{}:{frac}", upstream.unwrap_or("-"))
}

impl CellJob {
    pub fn new(
        dataset: &str,
        backbone: Family,
        strategy: StrategyMode,
        upstream: Option<&str>,
        fraction: Option<f64>,
    ) -> Self {
        CellJob {
            key: cell_key(dataset, backbone, strategy, upstream, fraction),
            dataset: dataset.to_string(),
            backbone,
            strategy,
            upstream: upstream.map(str::to_string),
            fraction,
        }
    }

    /// Row label within a comparison table: the strategy, plus its upstream.
    pub fn initialization(&self) -> String {
        match &self.upstream {
            Some(u) => format!("{}<-{u}", self.strategy),
            None => self.strategy.to_string(),
        }
    }

    pub fn strategy_config(&self, spec: &ExperimentSpec) -> StrategyConfig {
        let mut cfg = StrategyConfig::new(self.strategy, self.backbone, &self.dataset);
        if let Some(u) = &self.upstream {
            cfg = cfg.with_upstream(u);
        }
        if let Some((h, w)) = spec.input_size {
            cfg = cfg.with_input_size(h, w);
        }
        cfg.frozen_prefix = spec.frozen_prefix;
        cfg
    }
}

impl fmt::Display for CellJob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exclusion {
    pub key: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub cells: Vec<CellJob>,
    /// Cells dropped because their strategy is invalid for them (the
    /// upstream == target diagonal, ImageNet modes on CBR backbones).
    pub excluded: Vec<Exclusion>,
}

impl Grid {
    pub fn keys(&self) -> Vec<&str> {
        self.cells.iter().map(|c| c.key.as_str()).collect()
    }
}

fn parse_all<T: std::str::FromStr<Err = Error>>(names: &[String]) -> Result<Vec<T>> {
    names
        .iter()
        .map(|n| n.parse::<T>().map_err(|e| Error::Spec(e.to_string())))
        .collect()
}

/// Expands the grid axes into cell jobs, in axis order: dataset, backbone,
/// strategy, upstream, fraction.
pub fn expand_grid(spec: &ExperimentSpec) -> Result<Grid> {
    spec.validate()?;
    let axes = &spec.grid;
    if axes.datasets.is_empty() || axes.backbones.is_empty() || axes.strategies.is_empty() {
        return Err(Error::Spec(
            "the grid needs at least one dataset, backbone and strategy".into(),
        ));
    }
    for name in axes.datasets.iter().chain(&axes.upstreams) {
        if spec.source(name).is_none() {
            return Err(Error::Spec(format!("unknown dataset `{name}`")));
        }
    }
    let backbones: Vec<Family> = parse_all(&axes.backbones)?;
    let strategies: Vec<StrategyMode> = parse_all(&axes.strategies)?;
    let upstreams = if axes.upstreams.is_empty() {
        &axes.datasets
    } else {
        &axes.upstreams
    };
    let fractions: Vec<Option<f64>> = match &spec.low_data {
        Some(plan) => plan.fractions.iter().map(|f| Some(*f)).collect(),
        None => vec![None],
    };
    let mut cells = Vec::new();
    let mut excluded = Vec::new();
    for ds in &axes.datasets {
        for &bb in &backbones {
            for &st in &strategies {
                let ups: Vec<Option<&str>> = if st.needs_upstream() {
                    upstreams.iter().map(|u| Some(u.as_str())).collect()
                } else {
                    vec![None]
                };
                for up in ups {
                    for &frac in &fractions {
                        let job = CellJob::new(ds, bb, st, up, frac);
                        match job.strategy_config(spec).validate() {
                            Ok(()) => cells.push(job),
                            Err(e) => {
                                log::info!("excluding cell {}: {e}", job.key);
                                excluded.push(Exclusion {
                                    key: job.key,
                                    reason: e.to_string(),
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Spec(format!(
            "the grid is empty ({} cells excluded as invalid)",
            excluded.len()
        )));
    }
    Ok(Grid { cells, excluded })
}
