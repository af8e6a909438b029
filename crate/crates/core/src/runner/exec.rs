//! Grid execution with crash-safe resume.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{ExperimentSpec, Workspace};
use super::grid::{expand_grid, CellJob, Exclusion, Grid};
use super::store::{FailureRecord, ResultsStore, RunRecord};
use crate::data::{subsample_training, DataSplit, DatasetHandle, LowDataPlan};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RunResult};
use crate::train::{train, TrainHistory};
use crate::transfer::{prepare_model, run_upstream, TransferContext};
use crate::zoo::{read_sidecar, save_checkpoint, ModelGraph, TaskSpec, WeightStore};

pub const CONFIG_FILE: &str = "config.json";
pub const GRID_FILE: &str = "grid.json";

/// What one executed run hands back to the runner.
pub struct RunOutput {
    pub result: RunResult,
    pub history: Option<TrainHistory>,
    pub model: Option<ModelGraph>,
}

/// Trains and evaluates one `(cell, seed)` pair.
pub trait CellExecutor {
    fn execute(&mut self, job: &CellJob, seed: u64) -> Result<RunOutput>;
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue into a non-empty store, skipping completed runs.
    pub resume: bool,
    /// Restrict execution to these cell keys.
    pub cells: Option<Vec<String>>,
    /// Replaces the experiment's base seed.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub config_hash: String,
    pub executed: Vec<(String, u64)>,
    pub skipped: Vec<(String, u64)>,
    pub failed: Vec<(String, u64, String)>,
    pub excluded: Vec<Exclusion>,
}

/// Directory-safe form of a cell key.
pub fn cell_dir_name(key: &str) -> String {
    key.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn run_dir(out: &Path, key: &str, seed: u64) -> PathBuf {
    out.join("runs").join(cell_dir_name(key)).join(format!("seed-{seed}"))
}

/// Applies run options to a spec (seed override).
pub fn effective_spec(spec: &ExperimentSpec, opts: &RunOptions) -> ExperimentSpec {
    let mut spec = spec.clone();
    if let Some(s) = opts.seed {
        spec.train.base_seed = s;
    }
    spec
}

/// The grid cells selected by `opts.cells`.
pub fn select_cells(grid: &Grid, cells: Option<&[String]>) -> Result<Vec<CellJob>> {
    let Some(keys) = cells else {
        return Ok(grid.cells.clone());
    };
    let known: BTreeSet<&str> = grid.keys().into_iter().collect();
    if let Some(k) = keys.iter().find(|k| !known.contains(k.as_str())) {
        return Err(Error::Spec(format!("`{k}` is not a cell of this grid")));
    }
    Ok(grid.cells.iter().filter(|c| keys.contains(&c.key)).cloned().collect())
}

#[derive(Serialize)]
struct ConfigRecord<'a> {
    name: &'a str,
    config_hash: &'a str,
    spec: &'a ExperimentSpec,
}

#[derive(Serialize)]
struct GridRecord<'a> {
    config_hash: &'a str,
    cells: Vec<&'a str>,
    excluded: Vec<(&'a str, &'a str)>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Runs every selected `(cell, seed)` not already in the store.
///
/// Each completed run is appended to the store before the next starts, so
/// an interrupted grid resumes exactly where it stopped. Failed runs are
/// recorded and retried on the next resume.
pub fn run_grid(spec: &ExperimentSpec, opts: &RunOptions, exec: &mut dyn CellExecutor) -> Result<RunSummary> {
    let spec = effective_spec(spec, opts);
    let grid = expand_grid(&spec)?;
    let jobs = select_cells(&grid, opts.cells.as_deref())?;
    let out = &spec.output_dir;
    let store = ResultsStore::open(out)?;
    if !opts.resume && !store.is_empty()? {
        return Err(Error::State(format!(
            "{} already holds results; pass --resume to continue it or choose another --out",
            out.display()
        )));
    }
    let hash = spec.config_hash();
    write_json(
        &out.join(CONFIG_FILE),
        &ConfigRecord {
            name: &spec.name,
            config_hash: &hash,
            spec: &spec,
        },
    )?;
    write_json(
        &out.join(GRID_FILE),
        &GridRecord {
            config_hash: &hash,
            cells: grid.keys(),
            excluded: grid
                .excluded
                .iter()
                .map(|e| (e.key.as_str(), e.reason.as_str()))
                .collect(),
        },
    )?;
    let done = store.completed()?;
    let mut summary = RunSummary {
        config_hash: hash.clone(),
        excluded: grid.excluded.clone(),
        ..RunSummary::default()
    };
    for job in &jobs {
        for run in 0..spec.train.runs {
            let seed = spec.train.seed_for_run(run);
            if done.contains(&(job.key.clone(), seed)) {
                summary.skipped.push((job.key.clone(), seed));
                continue;
            }
            log::info!("running {} seed {seed}", job.key);
            match exec.execute(job, seed) {
                Ok(output) => {
                    let dir = run_dir(out, &job.key, seed);
                    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    if let Some(h) = &output.history {
                        h.write_jsonl(&dir.join("history.jsonl"))?;
                    }
                    if let Some(model) = &output.model {
                        if let Some(l) = &model.lineage {
                            l.save(&dir.join("lineage.json"))?;
                        }
                        if spec.save_checkpoints {
                            save_checkpoint(model, &dir.join("checkpoint"))?;
                        }
                    }
                    store.append_result(&RunRecord::new(job, &output.result, &hash))?;
                    summary.executed.push((job.key.clone(), seed));
                }
                Err(e) => {
                    log::warn!("cell {} seed {seed} failed: {e}", job.key);
                    store.append_failure(&FailureRecord {
                        cell_key: job.key.clone(),
                        seed,
                        error: e.to_string(),
                        config_hash: hash.clone(),
                        cell: job.clone(),
                    })?;
                    summary.failed.push((job.key.clone(), seed, e.to_string()));
                }
            }
        }
    }
    Ok(summary)
}

/// [`run_grid`] over the experiment's low-data plan (the default plan when the
/// spec has none).
pub fn sweep_lowdata(spec: &ExperimentSpec, opts: &RunOptions, exec: &mut dyn CellExecutor) -> Result<RunSummary> {
    let mut spec = spec.clone();
    spec.low_data.get_or_insert_with(LowDataPlan::default);
    run_grid(&spec, opts, exec)
}

/// The real executor: prepares, trains and evaluates models.
pub struct TrainingExecutor {
    spec: ExperimentSpec,
    ctx: TransferContext,
    loaded: BTreeMap<String, (DatasetHandle, DataSplit)>,
    upstream: BTreeMap<String, PathBuf>,
}

impl TrainingExecutor {
    pub fn new(spec: &ExperimentSpec, opts: &RunOptions) -> Self {
        let spec = effective_spec(spec, opts);
        let store = match &spec.weights_root {
            Some(root) => WeightStore::new(root),
            None => WeightStore::default(),
        };
        TrainingExecutor {
            spec,
            ctx: TransferContext { store },
            loaded: BTreeMap::new(),
            upstream: BTreeMap::new(),
        }
    }

    fn dataset(&mut self, name: &str) -> Result<(DatasetHandle, DataSplit)> {
        if let Some(d) = self.loaded.get(name) {
            return Ok(d.clone());
        }
        let split_dir = self.spec.output_dir.join("splits");
        let mut ws = Workspace::load(&self.spec, &[name.to_string()], Some(&split_dir))?;
        let data = ws.datasets.remove(name).expect("loaded");
        let split = ws.splits.remove(name).expect("loaded");
        let path = split_dir.join(format!("{name}.json"));
        if !path.is_file() {
            std::fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
            split.save(&path)?;
        }
        self.loaded.insert(name.to_string(), (data.clone(), split.clone()));
        Ok((data, split))
    }

    /// Upstream checkpoint for `job`, trained once per (upstream, backbone,
    /// origin) and reused across cells, seeds and resumed runs.
    fn upstream_checkpoint(&mut self, job: &CellJob) -> Result<PathBuf> {
        let up = job.upstream.as_deref().expect("upstream cell");
        let key = format!("{up}-{}-{}", job.backbone, job.strategy.origin());
        if let Some(p) = self.upstream.get(&key) {
            return Ok(p.clone());
        }
        let dir = self.spec.output_dir.join("upstream").join(cell_dir_name(&key));
        if read_sidecar(&dir).is_err() {
            let (data, split) = self.dataset(up)?;
            log::info!("training upstream model {key}");
            run_upstream(
                &job.strategy_config(&self.spec),
                &data,
                &split,
                &self.spec.train,
                &dir,
                &self.ctx,
            )?;
        }
        self.upstream.insert(key, dir.clone());
        Ok(dir)
    }
}

impl CellExecutor for TrainingExecutor {
    fn execute(&mut self, job: &CellJob, seed: u64) -> Result<RunOutput> {
        let (data, split) = self.dataset(&job.dataset)?;
        let train_split = match job.fraction {
            Some(f) => {
                let plan_seed = self.spec.low_data.as_ref().map_or(0, |p| p.seed);
                let strata = self.spec.stratify(data.task_kind()).then(|| data.strata());
                subsample_training(&split, f, plan_seed, strata.as_deref())?
            }
            None => split.clone(),
        };
        let mut cfg = job.strategy_config(&self.spec);
        if job.strategy.needs_upstream() {
            cfg = cfg.with_checkpoint(self.upstream_checkpoint(job)?);
        }
        let task = TaskSpec::for_dataset(&data);
        let (model, plan) = prepare_model(&cfg, &task, seed, &self.ctx)?;
        let (model, history) = train(model, &plan, &data, &train_split, &self.spec.train, seed)?;
        let result = evaluate(&model, &data, &split.test, job.strategy.name(), seed)?;
        Ok(RunOutput {
            result,
            history: Some(history),
            model: Some(model),
        })
    }
}
