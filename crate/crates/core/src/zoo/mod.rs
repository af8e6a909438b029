//! Network construction: CBR family, large ImageNet-style backbones, the
//! appended classification head, checkpoints and the local weight store.

mod checkpoint;
mod families;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_backbone_weights, load_checkpoint, read_sidecar, save_checkpoint, CheckpointSidecar, WeightStore,
};
pub use families::CbrConfig;

use crate::data::{Dataset, Preprocess, TaskKind};
use crate::error::{Error, Result};
use crate::nn::{Graph, LossKind, Mode, Padding, Section};
use crate::tensor::Tensor;
use crate::transfer::Lineage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Vgg16,
    InceptionV3,
    Resnet50,
    CbrTiny,
    CbrSmall,
    CbrLargew,
    CbrLarget,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Vgg16,
        Family::InceptionV3,
        Family::Resnet50,
        Family::CbrTiny,
        Family::CbrSmall,
        Family::CbrLargew,
        Family::CbrLarget,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Vgg16 => "vgg16",
            Family::InceptionV3 => "inception_v3",
            Family::Resnet50 => "resnet50",
            Family::CbrTiny => "cbr_tiny",
            Family::CbrSmall => "cbr_small",
            Family::CbrLargew => "cbr_largew",
            Family::CbrLarget => "cbr_larget",
        }
    }

    pub fn is_cbr(self) -> bool {
        self.cbr_config().is_some()
    }

    /// Whether ImageNet weights exist for this family.
    pub fn supports_imagenet(self) -> bool {
        !self.is_cbr()
    }

    pub fn default_input_size(self) -> (usize, usize) {
        match self {
            Family::InceptionV3 => (299, 299),
            _ => (224, 224),
        }
    }

    /// Pixel scaling the family was pre-trained with.
    pub fn preprocess(self) -> Preprocess {
        match self {
            Family::Vgg16 | Family::Resnet50 => Preprocess::Caffe,
            Family::InceptionV3 => Preprocess::Tf,
            _ => Preprocess::Unit,
        }
    }

    pub fn cbr_config(self) -> Option<CbrConfig> {
        let (conv_blocks, head_filters) = match self {
            Family::CbrTiny => (vec![(64, 5), (128, 3), (256, 3), (512, 3)], 256),
            Family::CbrSmall => (vec![(64, 5), (128, 3), (256, 3), (512, 3), (512, 3)], 128),
            Family::CbrLargew => (vec![(128, 5), (256, 3), (512, 3), (1024, 3), (1024, 3)], 256),
            Family::CbrLarget => (vec![(64, 5), (128, 3), (256, 3), (512, 3), (1024, 3)], 256),
            _ => return None,
        };
        Some(CbrConfig {
            conv_blocks,
            head_filters,
        })
    }

    pub fn head_filters(self) -> usize {
        self.cbr_config().map_or(256, |c| c.head_filters)
    }

    /// Name of the deepest convolutional feature map of the backbone.
    pub fn last_conv_layer(self) -> String {
        match self {
            Family::Vgg16 => "block5_conv3_relu".into(),
            Family::Resnet50 => "conv5_block3_out".into(),
            Family::InceptionV3 => "mixed10".into(),
            cbr => format!("block{}_relu", cbr.cbr_config().expect("cbr family").conv_blocks.len()),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Family> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidSpec(format!("unknown backbone family `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    Random,
    Imagenet,
    Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: Family,
    pub weights: Weights,
    #[serde(default)]
    pub checkpoint_ref: Option<PathBuf>,
    pub input_size: (usize, usize),
    /// Seed for freshly initialized parameters.
    #[serde(default)]
    pub seed: u64,
}

impl BackboneSpec {
    pub fn new(family: Family, weights: Weights) -> Self {
        BackboneSpec {
            family,
            weights,
            checkpoint_ref: None,
            input_size: family.default_input_size(),
            seed: 0,
        }
    }

    pub fn checkpoint(family: Family, dir: impl Into<PathBuf>) -> Self {
        BackboneSpec {
            checkpoint_ref: Some(dir.into()),
            ..BackboneSpec::new(family, Weights::Checkpoint)
        }
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights == Weights::Imagenet && !self.family.supports_imagenet() {
            return Err(Error::InvalidSpec(format!(
                "no ImageNet weights exist for {}",
                self.family
            )));
        }
        if self.weights == Weights::Checkpoint && self.checkpoint_ref.is_none() {
            return Err(Error::InvalidSpec(
                "weights = checkpoint requires checkpoint_ref".into(),
            ));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::InvalidSpec(format!(
                "input size {:?} must be positive",
                self.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    SigmoidPerLabel,
    Softmax,
}

/// What the classification head has to predict.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub class_names: Vec<String>,
    pub activation: OutputActivation,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, class_names: Vec<String>) -> Self {
        TaskSpec {
            kind,
            class_names,
            activation: OutputActivation::SigmoidPerLabel,
        }
    }

    pub fn binary() -> Self {
        TaskSpec::new(TaskKind::Binary, vec!["negative".into(), "positive".into()])
    }

    pub fn multilabel(classes: usize) -> Self {
        TaskSpec::new(
            TaskKind::Multilabel,
            (0..classes).map(|i| format!("class_{i}")).collect(),
        )
    }

    pub fn for_dataset(ds: &Dataset) -> Self {
        TaskSpec::new(ds.task_kind(), ds.class_names().to_vec())
    }

    pub fn with_softmax(mut self) -> Self {
        self.activation = OutputActivation::Softmax;
        self
    }

    /// One logit for sigmoid binary heads, otherwise one per class.
    pub fn output_dim(&self) -> usize {
        match (self.kind, self.activation) {
            (TaskKind::Binary, OutputActivation::SigmoidPerLabel) => 1,
            _ => self.class_names.len(),
        }
    }

    pub fn loss(&self) -> LossKind {
        match (self.kind, self.activation) {
            (_, OutputActivation::Softmax) => LossKind::CategoricalCe,
            (TaskKind::Binary, _) => LossKind::BinaryCe,
            (TaskKind::Multilabel, _) => LossKind::PerLabelBinaryCe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadInfo {
    pub output_dim: usize,
    pub activation: OutputActivation,
    pub dropout_rate: f32,
    pub filters: usize,
    pub class_names: Vec<String>,
    pub task_kind: TaskKind,
}

impl HeadInfo {
    pub fn task(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task_kind,
            class_names: self.class_names.clone(),
            activation: self.activation,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub family: Family,
    pub input_size: (usize, usize),
    pub graph: Graph,
    pub head: Option<HeadInfo>,
    /// Where the backbone weights came from.
    pub lineage: Option<Lineage>,
    /// Per-layer trainability set by `apply_freeze`; `None` trains everything.
    pub freeze: Option<Vec<bool>>,
}

pub const DEFAULT_DROPOUT: f32 = 0.5;

/// Headless layer graph of `family`; `include_top` adds the original
/// ImageNet classifier (used for reference parameter counts).
pub fn backbone_graph(
    family: Family,
    input_size: (usize, usize),
    seed: u64,
    materialize: bool,
    include_top: bool,
) -> Result<Graph> {
    let mut g = Graph::new([input_size.0, input_size.1, 3], materialize);
    match family {
        Family::Vgg16 => families::vgg16(&mut g, seed, include_top)?,
        Family::Resnet50 => families::resnet50(&mut g, seed, include_top)?,
        Family::InceptionV3 => families::inception_v3(&mut g, seed, include_top)?,
        cbr => families::cbr(&mut g, seed, &cbr.cbr_config().expect("cbr family"))?,
    };
    Ok(g)
}

/// Parameter count of the family's full reference network (with its
/// original classifier) at the default input size, without allocating.
pub fn reference_param_count(family: Family) -> Result<usize> {
    if family.is_cbr() {
        let g = backbone_graph(family, family.default_input_size(), 0, false, false)?;
        let m = ModelGraph {
            family,
            input_size: family.default_input_size(),
            graph: g,
            head: None,
            lineage: None,
            freeze: None,
        };
        return Ok(attach_head(m, &TaskSpec::binary(), DEFAULT_DROPOUT, 0)?.param_count());
    }
    Ok(backbone_graph(family, family.default_input_size(), 0, false, true)?.param_count())
}

/// Randomly initialized CBR network with the classification head attached.
pub fn build_cbr(variant: Family, input_size: (usize, usize), task: &TaskSpec, seed: u64) -> Result<ModelGraph> {
    if !variant.is_cbr() {
        return Err(Error::InvalidSpec(format!("{variant} is not a CBR variant")));
    }
    let spec = BackboneSpec::new(variant, Weights::Random)
        .with_input_size(input_size.0, input_size.1)
        .with_seed(seed);
    let backbone = build_backbone(&spec, &WeightStore::default())?;
    attach_head(
        backbone,
        task,
        DEFAULT_DROPOUT,
        crate::nn::graph::mix_seed(seed, 0x4845_4144),
    )
}

/// Headless backbone with random, ImageNet or checkpoint weights.
pub fn build_backbone(spec: &BackboneSpec, store: &WeightStore) -> Result<ModelGraph> {
    spec.validate()?;
    let graph = backbone_graph(spec.family, spec.input_size, spec.seed, true, false)?;
    let mut model = ModelGraph {
        family: spec.family,
        input_size: spec.input_size,
        graph,
        head: None,
        lineage: None,
        freeze: None,
    };
    match spec.weights {
        Weights::Random => {}
        Weights::Imagenet => {
            let dir = store.resolve_imagenet(spec.family)?;
            load_backbone_weights(&mut model, &dir)?;
            model.lineage = None;
        }
        Weights::Checkpoint => {
            let dir = spec.checkpoint_ref.as_ref().expect("validated");
            let sidecar = load_backbone_weights(&mut model, dir)?;
            model.lineage = sidecar.strategy_lineage;
        }
    }
    Ok(model)
}

/// Appends conv(3x3) + ReLU + dropout + global average pooling + dense logits.
pub fn attach_head(mut backbone: ModelGraph, task: &TaskSpec, dropout_rate: f32, seed: u64) -> Result<ModelGraph> {
    if backbone.head.is_some() {
        return Err(Error::State("model already has a classification head".into()));
    }
    if task.class_names.is_empty() {
        return Err(Error::Argument("task declares no classes".into()));
    }
    let filters = backbone.family.head_filters();
    let out = task.output_dim();
    let top = backbone.graph.output_node();
    let mut b = backbone.graph.builder(seed, Section::Head);
    let x = b.conv("head_conv", top, filters, (3, 3), (1, 1), Padding::Same, true)?;
    let x = b.relu("head_relu", x)?;
    let x = b.dropout("head_dropout", x, dropout_rate)?;
    let x = b.global_avg_pool("head_pool", x)?;
    b.dense("head_logits", x, out, true)?;
    backbone.freeze = None;
    backbone.head = Some(HeadInfo {
        output_dim: out,
        activation: task.activation,
        dropout_rate,
        filters,
        class_names: task.class_names.clone(),
        task_kind: task.kind,
    });
    Ok(backbone)
}

pub fn param_count(model: &ModelGraph) -> usize {
    model.param_count()
}

impl ModelGraph {
    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.head.as_ref().map(|h| h.output_dim)
    }

    pub fn preprocess(&self) -> Preprocess {
        self.family.preprocess()
    }

    pub fn last_conv_layer(&self) -> String {
        self.family.last_conv_layer()
    }

    pub fn group_sections(&self) -> Vec<Section> {
        self.graph.groups().iter().map(|g| g.section).collect()
    }

    /// SHA-256 over the bytes of every backbone parameter.
    pub fn backbone_digest(&self) -> String {
        self.graph.digest(|g| g.section == Section::Backbone)
    }

    pub fn head_digest(&self) -> String {
        self.graph.digest(|g| g.section == Section::Head)
    }

    pub fn loss(&self) -> Result<LossKind> {
        Ok(self.require_head()?.task().loss())
    }

    pub fn require_head(&self) -> Result<&HeadInfo> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::State("model has no classification head".into()))
    }

    /// Inference-mode logits, `[batch, 1, 1, output_dim]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.require_head()?;
        self.graph.infer(x, None)
    }

    /// Class probabilities, row-major `[batch, output_dim]`.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f32>> {
        let loss = self.loss()?;
        Ok(loss.activate(&self.logits(x)?))
    }

    /// Training-mode forward pass helper for tests and diagnostics.
    pub fn forward_training(&self, x: &Tensor, trainable: &[bool], seed: u64) -> Result<Tensor> {
        let mode = Mode {
            training: true,
            trainable: Some(trainable),
            dropout_seed: seed,
        };
        Ok(self.graph.forward(x, &mode)?.output().clone())
    }
}
