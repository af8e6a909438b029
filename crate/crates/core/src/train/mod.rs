//! Seeded training loop, per-epoch histories and repeated runs.

mod history;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use history::{EpochRecord, TrainHistory};

use crate::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RunResult};
use crate::nn::graph::mix_seed;
use crate::nn::{LossKind, Mode, Optimizer, OptimizerConfig, ParamGroup};
use crate::tensor::Tensor;
use crate::transfer::{
    apply_freeze, prepare_model, FreezePlan, Lineage, StrategyConfig, StrategyMode, TransferContext,
};
use crate::zoo::{ModelGraph, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// `None` picks the loss matching the head.
    pub loss: Option<LossKind>,
    pub runs: usize,
    pub base_seed: u64,
    pub optimizer: OptimizerConfig,
    /// Evaluate the weights of the best validation epoch instead of the last.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-4,
            loss: None,
            runs: 5,
            base_seed: 0,
            optimizer: OptimizerConfig::default(),
            restore_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.runs == 0 {
            return Err(Error::Argument(format!(
                "epochs ({}), batch_size ({}) and runs ({}) must be at least 1",
                self.epochs, self.batch_size, self.runs
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn seed_for_run(&self, run: usize) -> u64 {
        self.base_seed + run as u64
    }
}

/// Items above this many input floats are streamed batch by batch instead
/// of being decoded once up front.
const CACHE_LIMIT: usize = 1 << 27;

struct Inputs<'a> {
    data: &'a Dataset,
    size: (usize, usize),
    pre: crate::data::Preprocess,
    cached: Option<(Vec<usize>, Tensor)>,
}

impl<'a> Inputs<'a> {
    fn new(model: &ModelGraph, data: &'a Dataset, indices: &[usize]) -> Result<Self> {
        let size = model.input_size;
        let pre = model.preprocess();
        let cached = if indices.len() * size.0 * size.1 * 3 <= CACHE_LIMIT {
            Some((indices.to_vec(), data.tensor(indices, size, pre)?))
        } else {
            None
        };
        Ok(Inputs {
            data,
            size,
            pre,
            cached,
        })
    }

    /// `positions` index into the list the cache was built from; `items`
    /// are the matching dataset indices.
    fn batch(&self, positions: &[usize], items: &[usize]) -> Result<Tensor> {
        match &self.cached {
            Some((_, t)) => Ok(t.select(positions)),
            None => self.data.tensor(items, self.size, self.pre),
        }
    }
}

fn check_loss(loss: LossKind, model: &ModelGraph) -> Result<()> {
    let out = model.require_head()?.output_dim;
    let ok = match loss {
        LossKind::BinaryCe => out == 1,
        LossKind::PerLabelBinaryCe => true,
        LossKind::CategoricalCe => out >= 2,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "{loss:?} does not fit a head with {out} outputs"
        )))
    }
}

/// Micro precision of `probs >= 0.5` against `targets`.
fn precision_at_half(probs: &[f32], targets: &[f32]) -> f64 {
    let (mut tp, mut fp) = (0u64, 0u64);
    for (p, t) in probs.iter().zip(targets) {
        if *p >= 0.5 {
            if *t > 0.5 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

/// Trains `model` on `split.train`, validating on `split.val` after every
/// epoch. The returned model's lineage ends with the dataset's name.
pub fn train(
    model: ModelGraph,
    plan: &FreezePlan,
    data: &Dataset,
    split: &DataSplit,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelGraph, TrainHistory)> {
    cfg.validate()?;
    let mut model = apply_freeze(model, plan)?;
    let loss = cfg.loss.unwrap_or(model.loss()?);
    check_loss(loss, &model)?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Argument(
            "training needs non-empty train and validation parts".into(),
        ));
    }
    let out_dim = model.require_head()?.output_dim;
    let train_targets = data.targets(&split.train, out_dim)?;
    let val_targets = data.targets(&split.val, out_dim)?;
    let mut history = TrainHistory::default();
    let mut batch_size = cfg.batch_size;
    if batch_size > split.train.len() {
        let note = format!(
            "batch size {batch_size} exceeds the {} training items; clamped",
            split.train.len()
        );
        log::warn!("{note}");
        history.warnings.push(note);
        batch_size = split.train.len();
    }
    let trainable = model.freeze.clone().expect("set by apply_freeze");
    let train_x = Inputs::new(&model, data, &split.train)?;
    let val_x = Inputs::new(&model, data, &split.val)?;
    let mut opt = Optimizer::new(cfg.optimizer.clone(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5348_5546));
    let mut best: Option<(f64, Vec<ParamGroup>)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for positions in order.chunks(batch_size) {
            step += 1;
            let items: Vec<usize> = positions.iter().map(|&p| split.train[p]).collect();
            let x = train_x.batch(positions, &items)?;
            let y: Vec<f32> = positions
                .iter()
                .flat_map(|&p| train_targets[p * out_dim..(p + 1) * out_dim].iter().copied())
                .collect();
            let mode = Mode {
                training: true,
                trainable: Some(&trainable),
                dropout_seed: mix_seed(seed, step as u64),
            };
            let pass = model.graph.forward(&x, &mode)?;
            let (batch_loss, grad) = loss.loss_and_grad(pass.output(), &y);
            if !batch_loss.is_finite() || !grad.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss,
                    last_good_epoch: history.records.last().map(|r| r.epoch),
                });
            }
            let grads = model.graph.backward(&pass, grad, &trainable, None)?;
            opt.step(&mut model.graph, &grads);
            model.graph.apply_bn_updates(&pass.bn_updates);
            total += batch_loss * positions.len() as f64;
        }
        let train_loss = total / split.train.len() as f64;
        let positions: Vec<usize> = (0..split.val.len()).collect();
        let mut logits = Vec::with_capacity(split.val.len() * out_dim);
        for chunk in positions.chunks(batch_size.max(1)) {
            let items: Vec<usize> = chunk.iter().map(|&p| split.val[p]).collect();
            logits.extend_from_slice(model.graph.infer(&val_x.batch(chunk, &items)?, None)?.data());
        }
        let logits = Tensor::from_rows(split.val.len(), out_dim, logits)?;
        let val_loss = loss.loss(&logits, &val_targets);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                loss: if train_loss.is_finite() { val_loss } else { train_loss },
                last_good_epoch: history.records.last().map(|r| r.epoch),
            });
        }
        let val_precision = precision_at_half(&loss.activate(&logits), &val_targets);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            history.best_epoch = Some(epoch);
            best = Some((
                val_loss,
                if cfg.restore_best {
                    model.graph.groups().to_vec()
                } else {
                    Vec::new()
                },
            ));
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_precision,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    if cfg.restore_best {
        if let Some((_, groups)) = best {
            model.graph.groups_mut().clone_from_slice(&groups);
        }
    }
    let mut lineage = model
        .lineage
        .take()
        .unwrap_or_else(|| Lineage::start(StrategyMode::RandomInit, model.family, seed));
    lineage.weight_origin_chain.push(data.name().to_string());
    lineage.seed = seed;
    lineage.train_config_hash = cfg.hash();
    model.lineage = Some(lineage);
    Ok((model, history))
}

/// Output probabilities for `indices`, row-major `[items, output_dim]`.
pub fn predict(model: &ModelGraph, data: &Dataset, indices: &[usize], batch_size: usize) -> Result<Vec<f32>> {
    let loss = model.loss()?;
    let mut out = Vec::new();
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = data.tensor(chunk, model.input_size, model.preprocess())?;
        out.extend(loss.activate(&model.logits(&x)?));
    }
    Ok(out)
}

/// Outcome of one run inside a repeated experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub seed: u64,
    pub error: String,
}

/// `cfg.runs` independent runs; run `i` uses seed `base_seed + i` and a
/// freshly prepared model. Failed runs are recorded, not fatal.
pub fn repeat_runs(
    strategy: &StrategyConfig,
    data: &Dataset,
    split: &DataSplit,
    cfg: &TrainConfig,
    ctx: &TransferContext,
) -> Result<(Vec<RunResult>, Vec<RunFailure>)> {
    cfg.validate()?;
    let task = TaskSpec::for_dataset(data);
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for i in 0..cfg.runs {
        let seed = cfg.seed_for_run(i);
        let outcome = prepare_model(strategy, &task, seed, ctx)
            .and_then(|(model, plan)| train(model, &plan, data, split, cfg, seed))
            .and_then(|(model, _)| evaluate(&model, data, &split.test, strategy.mode.name(), seed));
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                log::warn!("run with seed {seed} failed: {e}");
                failures.push(RunFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok((results, failures))
}
