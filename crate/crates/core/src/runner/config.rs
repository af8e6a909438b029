//! Declarative experiment files (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    default_stratified, inspection_dataset, load_predefined_splits, make_splits, read_manifest, register_toy,
    synth_toy_dataset, DataSplit, Dataset, DatasetDescriptor, DatasetHandle, LowDataPlan, Source, SplitFiles, TaskKind,
    ToySpec, DEFAULT_RATIOS,
};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    pub datasets: Vec<String>,
    pub backbones: Vec<String>,
    pub strategies: Vec<String>,
    /// Upstream sources for in-domain and combination cells; empty means
    /// every dataset on the `datasets` axis.
    #[serde(default)]
    pub upstreams: Vec<String>,
}

/// Toy generator parameters; the dataset name comes from the source entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyParams {
    pub height: usize,
    pub width: usize,
    pub task_kind: TaskKind,
    #[serde(default = "two")]
    pub classes: usize,
    pub items_per_class: usize,
    pub seed: u64,
    #[serde(default)]
    pub domain: u32,
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Image root for manifest paths; defaults to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Class order; binary lists the negative class first. Required for
    /// binary manifests of datasets outside the built-in catalogue.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    /// Official part lists for datasets that ship them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<SplitFiles>,
}

impl DatasetSource {
    pub fn toy_spec(&self) -> Option<ToySpec> {
        self.toy.as_ref().map(|t| ToySpec {
            name: Some(self.name.clone()),
            height: t.height,
            width: t.width,
            task_kind: t.task_kind,
            classes: t.classes,
            items_per_class: t.items_per_class,
            seed: t.seed,
            domain: t.domain,
        })
    }

    /// Builds the dataset handle (generating toys in memory).
    pub fn load(&self) -> Result<DatasetHandle> {
        match (&self.toy, &self.manifest) {
            (Some(_), None) => register_toy(&synth_toy_dataset(&self.toy_spec().expect("toy"))?),
            (None, Some(path)) => {
                let (kind, rows) = read_manifest(path)?;
                let descriptor = match inspection_dataset(&self.name) {
                    Some(mut d) => {
                        if d.task_kind != kind {
                            return Err(Error::Manifest(format!(
                                "`{}` is {:?} but {} has a {:?} header",
                                self.name,
                                d.task_kind,
                                path.display(),
                                kind
                            )));
                        }
                        if let Some(c) = &self.class_names {
                            d.class_names = c.clone();
                        }
                        d.source = Source::Manifest { path: path.clone() };
                        d
                    }
                    None => {
                        let class_names = match (&self.class_names, kind) {
                            (Some(c), _) => c.clone(),
                            (None, TaskKind::Multilabel) => {
                                let mut all: Vec<String> = rows.iter().flat_map(|r| r.labels.iter().cloned()).collect();
                                all.sort();
                                all.dedup();
                                all
                            }
                            (None, TaskKind::Binary) => {
                                return Err(Error::Spec(format!(
                                    "dataset `{}`: binary manifests need `class_names` (negative class first)",
                                    self.name
                                )))
                            }
                        };
                        DatasetDescriptor {
                            name: self.name.clone(),
                            task_kind: kind,
                            class_names,
                            item_count: rows.len(),
                            source: Source::Manifest { path: path.clone() },
                            has_predefined_splits: self.splits.is_some(),
                            alternate_counts: Vec::new(),
                        }
                    }
                };
                let root = self
                    .root
                    .clone()
                    .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
                Ok(std::sync::Arc::new(Dataset::new(descriptor, &rows, root)?))
            }
            _ => Err(Error::Spec(format!(
                "dataset `{}` needs exactly one of `toy` or `manifest`",
                self.name
            ))),
        }
    }
}

/// A user-supplied number shown alongside computed results, never computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRow {
    pub label: String,
    pub dataset: String,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub grid: GridAxes,
    #[serde(default)]
    pub low_data: Option<LowDataPlan>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
    /// `None` stratifies binary datasets only.
    #[serde(default)]
    pub stratified: Option<bool>,
    /// Overrides each family's default input size.
    #[serde(default)]
    pub input_size: Option<(usize, usize)>,
    #[serde(default)]
    pub frozen_prefix: Option<usize>,
    #[serde(default)]
    pub save_checkpoints: bool,
    /// Root of the pretrained weight store (`<root>/imagenet/<family>`).
    #[serde(default)]
    pub weights_root: Option<PathBuf>,
    #[serde(default, rename = "dataset")]
    pub datasets: Vec<DatasetSource>,
    #[serde(default, rename = "reference")]
    pub references: Vec<ReferenceRow>,
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn default_ratios() -> [f64; 3] {
    DEFAULT_RATIOS
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<ExperimentSpec> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a spec file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<ExperimentSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        spec.rebase(base);
        Ok(spec)
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(w) = &mut self.weights_root {
            fix(w);
        }
        for d in &mut self.datasets {
            for p in [&mut d.manifest, &mut d.root].into_iter().flatten() {
                fix(p);
            }
            if let Some(s) = &mut d.splits {
                fix(&mut s.train);
                fix(&mut s.val);
                fix(&mut s.test);
            }
        }
    }

    pub fn source(&self, name: &str) -> Option<&DatasetSource> {
        self.datasets.iter().find(|d| d.name == name)
    }

    /// Content hash of everything that affects results (the output
    /// location is excluded).
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("spec serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
            o.remove("reference");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(plan) = &self.low_data {
            plan.validate()?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.datasets {
            if !seen.insert(d.name.as_str()) {
                return Err(Error::Spec(format!("dataset `{}` is defined twice", d.name)));
            }
        }
        Ok(())
    }

    pub fn stratify(&self, kind: TaskKind) -> bool {
        self.stratified.unwrap_or_else(|| default_stratified(kind))
    }
}

/// Loaded datasets and their splits, keyed by name.
#[derive(Clone, Debug, Default)]
pub struct Workspace {
    pub datasets: BTreeMap<String, DatasetHandle>,
    pub splits: BTreeMap<String, DataSplit>,
}

impl Workspace {
    /// Loads the named datasets; splits come from `split_dir/<name>.json`
    /// when present, else official part lists, else a seeded split.
    pub fn load(spec: &ExperimentSpec, names: &[String], split_dir: Option<&Path>) -> Result<Workspace> {
        let mut ws = Workspace::default();
        for name in names {
            if ws.datasets.contains_key(name) {
                continue;
            }
            let src = spec
                .source(name)
                .ok_or_else(|| Error::Spec(format!("unknown dataset `{name}`")))?;
            let data = src.load()?;
            let saved = split_dir
                .map(|d| d.join(format!("{name}.json")))
                .filter(|p| p.is_file());
            let split = match (saved, &src.splits) {
                (Some(path), _) => {
                    let s = DataSplit::load(&path)?;
                    s.validate(data.len())?;
                    s
                }
                (None, Some(files)) => load_predefined_splits(&data, files)?,
                (None, None) => make_splits(&data, spec.ratios, spec.split_seed, spec.stratify(data.task_kind()))?,
            };
            ws.splits.insert(name.clone(), split);
            ws.datasets.insert(name.clone(), data);
        }
        Ok(ws)
    }
}
