//! The initialization regimes (random, cross-domain FE/FT, in-domain,
//! combination), freeze plans and upstream training.

mod freeze;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use freeze::{apply_freeze, FreezePlan};

use crate::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::nn::graph::mix_seed;
use crate::train::{train, TrainConfig};
use crate::zoo::{
    attach_head, build_backbone, read_sidecar, save_checkpoint, BackboneSpec, Family, ModelGraph, TaskSpec,
    WeightStore, Weights, DEFAULT_DROPOUT,
};

pub const IMAGENET: &str = "imagenet";
pub const RANDOM: &str = "random";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyMode {
    RandomInit,
    CrossDomainFe,
    CrossDomainFt,
    InDomain,
    Combination,
}

impl StrategyMode {
    pub const ALL: [StrategyMode; 5] = [
        StrategyMode::RandomInit,
        StrategyMode::CrossDomainFe,
        StrategyMode::CrossDomainFt,
        StrategyMode::InDomain,
        StrategyMode::Combination,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyMode::RandomInit => "random_init",
            StrategyMode::CrossDomainFe => "cross_domain_fe",
            StrategyMode::CrossDomainFt => "cross_domain_ft",
            StrategyMode::InDomain => "in_domain",
            StrategyMode::Combination => "combination",
        }
    }

    pub fn needs_upstream(self) -> bool {
        matches!(self, StrategyMode::InDomain | StrategyMode::Combination)
    }

    pub fn needs_imagenet(self) -> bool {
        matches!(
            self,
            StrategyMode::CrossDomainFe | StrategyMode::CrossDomainFt | StrategyMode::Combination
        )
    }

    /// First entry of the weight-origin chain this mode starts from.
    pub fn origin(self) -> &'static str {
        if self.needs_imagenet() {
            IMAGENET
        } else {
            RANDOM
        }
    }
}

impl fmt::Display for StrategyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyMode::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::InvalidSpec(format!("unknown strategy `{s}`")))
    }
}

/// Provenance of a model's backbone weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub mode: StrategyMode,
    pub backbone_family: Family,
    /// `["imagenet", "MCDS", "CDS"]`: where the weights started, then every
    /// dataset they were trained on, in order.
    pub weight_origin_chain: Vec<String>,
    pub seed: u64,
    pub train_config_hash: String,
}

impl Lineage {
    pub fn start(mode: StrategyMode, family: Family, seed: u64) -> Self {
        Lineage {
            mode,
            backbone_family: family,
            weight_origin_chain: vec![mode.origin().to_string()],
            seed,
            train_config_hash: String::new(),
        }
    }

    pub fn origin(&self) -> Option<&str> {
        self.weight_origin_chain.first().map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub mode: StrategyMode,
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub upstream_dataset: Option<String>,
    #[serde(default)]
    pub upstream_checkpoint: Option<PathBuf>,
    pub target_dataset: String,
    /// Fine-tuning depth knob: freeze this many leading backbone layers.
    /// `None` fine-tunes everything.
    #[serde(default)]
    pub frozen_prefix: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f32,
}

fn default_dropout() -> f32 {
    DEFAULT_DROPOUT
}

impl StrategyConfig {
    pub fn new(mode: StrategyMode, family: Family, target: &str) -> Self {
        let weights = if mode.needs_imagenet() && mode != StrategyMode::Combination {
            Weights::Imagenet
        } else {
            Weights::Random
        };
        StrategyConfig {
            mode,
            backbone: BackboneSpec::new(family, weights),
            upstream_dataset: None,
            upstream_checkpoint: None,
            target_dataset: target.to_string(),
            frozen_prefix: None,
            dropout_rate: DEFAULT_DROPOUT,
        }
    }

    pub fn with_upstream(mut self, dataset: &str) -> Self {
        self.upstream_dataset = Some(dataset.to_string());
        self
    }

    pub fn with_checkpoint(mut self, dir: impl Into<PathBuf>) -> Self {
        self.upstream_checkpoint = Some(dir.into());
        self
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.backbone.input_size = (h, w);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode.needs_upstream() {
            let up = self
                .upstream_dataset
                .as_deref()
                .ok_or_else(|| Error::InvalidSpec(format!("{} needs an upstream dataset", self.mode)))?;
            if up.eq_ignore_ascii_case(&self.target_dataset) {
                return Err(Error::MutualExclusion(up.to_string()));
            }
        } else if self.upstream_dataset.is_some() {
            return Err(Error::InvalidSpec(format!("{} takes no upstream dataset", self.mode)));
        }
        if self.mode.needs_imagenet() && !self.backbone.family.supports_imagenet() {
            return Err(Error::InvalidSpec(format!(
                "{} starts from ImageNet weights, which {} does not have",
                self.mode, self.backbone.family
            )));
        }
        Ok(())
    }

    /// Strategy for training the upstream model of this configuration.
    fn upstream_backbone(&self, seed: u64) -> BackboneSpec {
        let weights = if self.mode == StrategyMode::Combination {
            Weights::Imagenet
        } else {
            Weights::Random
        };
        BackboneSpec {
            weights,
            checkpoint_ref: None,
            seed,
            ..self.backbone.clone()
        }
    }
}

/// Shared resources for model preparation.
#[derive(Clone, Debug, Default)]
pub struct TransferContext {
    pub store: WeightStore,
}

/// Builds the model a strategy starts downstream training from, with a
/// fresh head for `task` and the matching freeze plan.
pub fn prepare_model(
    cfg: &StrategyConfig,
    task: &TaskSpec,
    seed: u64,
    ctx: &TransferContext,
) -> Result<(ModelGraph, FreezePlan)> {
    cfg.validate()?;
    let family = cfg.backbone.family;
    let mut spec = BackboneSpec {
        seed,
        ..cfg.backbone.clone()
    };
    let mut lineage = Lineage::start(cfg.mode, family, seed);
    match cfg.mode {
        StrategyMode::RandomInit => spec.weights = Weights::Random,
        StrategyMode::CrossDomainFe | StrategyMode::CrossDomainFt => spec.weights = Weights::Imagenet,
        StrategyMode::InDomain | StrategyMode::Combination => {
            let upstream = cfg.upstream_dataset.as_deref().expect("validated");
            let dir = cfg.upstream_checkpoint.clone().ok_or_else(|| Error::Resolution {
                what: format!("{} checkpoint trained on `{upstream}`", cfg.mode),
                hint: "run the upstream training first (run_upstream) or set upstream_checkpoint".into(),
            })?;
            let sidecar = read_sidecar(&dir)?;
            let prior = sidecar
                .strategy_lineage
                .ok_or_else(|| Error::Lineage(format!("checkpoint {} records no lineage", dir.display())))?;
            if prior.origin() != Some(cfg.mode.origin()) {
                return Err(Error::Lineage(format!(
                    "{} needs a checkpoint whose lineage begins at `{}`, {} begins at {:?}",
                    cfg.mode,
                    cfg.mode.origin(),
                    dir.display(),
                    prior.origin()
                )));
            }
            if prior.weight_origin_chain.last().map(String::as_str) != Some(upstream) {
                return Err(Error::Lineage(format!(
                    "checkpoint {} was trained on {:?}, expected `{upstream}`",
                    dir.display(),
                    prior.weight_origin_chain.last()
                )));
            }
            if prior.backbone_family != family {
                return Err(Error::Lineage(format!(
                    "checkpoint {} holds a {} backbone, the strategy uses {family}",
                    dir.display(),
                    prior.backbone_family
                )));
            }
            spec.weights = Weights::Checkpoint;
            spec.checkpoint_ref = Some(dir);
            lineage.weight_origin_chain = prior.weight_origin_chain;
        }
    }
    let backbone = build_backbone(&spec, &ctx.store)?;
    let mut model = attach_head(backbone, task, cfg.dropout_rate, mix_seed(seed, 0x4845_4144))?;
    model.lineage = Some(lineage);
    let plan = match (cfg.mode, cfg.frozen_prefix) {
        (StrategyMode::CrossDomainFe, _) => FreezePlan::freeze_backbone(&model),
        (_, Some(k)) => FreezePlan::freeze_prefix(&model, k),
        _ => FreezePlan::all_trainable(&model),
    };
    Ok((model, plan))
}

/// Trains the upstream model of an in-domain or combination strategy and
/// saves it under `out_dir`. The checkpoint's transferable set is the
/// backbone; its lineage ends with the upstream dataset.
pub fn run_upstream(
    cfg: &StrategyConfig,
    upstream: &Dataset,
    split: &DataSplit,
    train_cfg: &TrainConfig,
    out_dir: &Path,
    ctx: &TransferContext,
) -> Result<PathBuf> {
    cfg.validate()?;
    if !cfg.mode.needs_upstream() {
        return Err(Error::InvalidSpec(format!("{} has no upstream stage", cfg.mode)));
    }
    let name = cfg.upstream_dataset.as_deref().expect("validated");
    if name != upstream.name() {
        return Err(Error::Argument(format!(
            "strategy names upstream `{name}`, got dataset `{}`",
            upstream.name()
        )));
    }
    let seed = train_cfg.base_seed;
    let backbone = build_backbone(&cfg.upstream_backbone(seed), &ctx.store)?;
    let task = TaskSpec::for_dataset(upstream);
    let mut model = attach_head(backbone, &task, cfg.dropout_rate, mix_seed(seed, 0x4845_4144))?;
    model.lineage = Some(Lineage::start(cfg.mode, cfg.backbone.family, seed));
    let plan = FreezePlan::all_trainable(&model);
    let (trained, _history) = train(model, &plan, upstream, split, train_cfg, seed)?;
    save_checkpoint(&trained, out_dir)?;
    Ok(out_dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn in_domain_upstream_equal_to_target_is_rejected() {
        let cfg = StrategyConfig::new(StrategyMode::InDomain, Family::CbrTiny, "CDS").with_upstream("CDS");
        assert!(matches!(cfg.validate(), Err(Error::MutualExclusion(_))));
        let err = prepare_model(&cfg, &TaskSpec::binary(), 0, &TransferContext::default()).unwrap_err();
        assert!(matches!(err, Error::MutualExclusion(_)));
    }

    #[test]
    fn cross_domain_needs_an_imagenet_family() {
        let cfg = StrategyConfig::new(StrategyMode::CrossDomainFe, Family::CbrTiny, "BCD");
        assert!(matches!(cfg.validate(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn missing_upstream_checkpoint_is_a_resolution_error() {
        let cfg = StrategyConfig::new(StrategyMode::InDomain, Family::CbrTiny, "CDS").with_upstream("MCDS");
        let err = prepare_model(&cfg, &TaskSpec::binary(), 0, &TransferContext::default()).unwrap_err();
        assert!(matches!(err, Error::Resolution { .. }));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in StrategyMode::ALL {
            assert_eq!(m.name().parse::<StrategyMode>().unwrap(), m);
        }
    }
}
