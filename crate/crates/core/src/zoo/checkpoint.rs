//! Checkpoint directories: `params.npz` (one array per parameter tensor,
//! keyed `layer/tensor`) next to a `model.json` sidecar.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use ndarray_npy::{NpzReader, NpzWriter};
use serde::{Deserialize, Serialize};

use super::{attach_head, backbone_graph, Family, HeadInfo, ModelGraph, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::Section;
use crate::transfer::Lineage;

pub const PARAMS_FILE: &str = "params.npz";
pub const SIDECAR_FILE: &str = "model.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub family: Family,
    pub input_size: (usize, usize),
    pub output_dim: Option<usize>,
    pub class_names: Vec<String>,
    pub strategy_lineage: Option<Lineage>,
    #[serde(default)]
    pub head: Option<HeadInfo>,
    /// Layers that transfer to a new task (the backbone).
    #[serde(default)]
    pub transferable: Vec<String>,
    #[serde(default)]
    pub backbone_digest: String,
}

fn archive_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Archive {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn save_checkpoint(model: &ModelGraph, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = dir.join(PARAMS_FILE);
    let file = File::create(&params).map_err(|e| Error::io(&params, e))?;
    let mut npz = NpzWriter::new(BufWriter::new(file));
    for g in model.graph.groups() {
        for t in &g.tensors {
            let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), t.data.clone()).map_err(|e| archive_err(&params, e))?;
            npz.add_array(format!("{}/{}", g.name, t.name), &arr)
                .map_err(|e| archive_err(&params, e))?;
        }
    }
    npz.finish().map_err(|e| archive_err(&params, e))?;
    let sidecar = CheckpointSidecar {
        family: model.family,
        input_size: model.input_size,
        output_dim: model.output_dim(),
        class_names: model.head.as_ref().map(|h| h.class_names.clone()).unwrap_or_default(),
        strategy_lineage: model.lineage.clone(),
        head: model.head.clone(),
        transferable: model
            .graph
            .groups()
            .iter()
            .filter(|g| g.section == Section::Backbone)
            .map(|g| g.name.clone())
            .collect(),
        backbone_digest: model.backbone_digest(),
    };
    let path = dir.join(SIDECAR_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
}

pub fn read_sidecar(dir: &Path) -> Result<CheckpointSidecar> {
    let path = dir.join(SIDECAR_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Resolution {
            what: format!("checkpoint {}", dir.display()),
            hint: format!("no {SIDECAR_FILE} found; pass a directory written by save_checkpoint"),
        },
        _ => Error::io(&path, e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn open_params(dir: &Path) -> Result<(PathBuf, NpzReader<BufReader<File>>)> {
    let path = dir.join(PARAMS_FILE);
    let file = File::open(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Resolution {
            what: format!("parameter archive {}", path.display()),
            hint: "the checkpoint directory is incomplete".into(),
        },
        _ => Error::io(&path, e),
    })?;
    let npz = NpzReader::new(BufReader::new(file)).map_err(|e| archive_err(&path, e))?;
    Ok((path, npz))
}

/// Copies the parameters of every group selected by `include` from the
/// archive into `model`, checking names and shapes.
fn load_groups(model: &mut ModelGraph, dir: &Path, include: impl Fn(Section) -> bool) -> Result<()> {
    let (path, mut npz) = open_params(dir)?;
    for g in model.graph.groups_mut() {
        if !include(g.section) {
            continue;
        }
        for t in g.tensors.iter_mut() {
            let key = format!("{}/{}", g.name, t.name);
            let arr: ArrayD<f32> = npz
                .by_name(&key)
                .map_err(|e| Error::Lineage(format!("{}: `{key}` unavailable ({e})", path.display())))?;
            if arr.shape() != t.shape.as_slice() {
                return Err(Error::Lineage(format!(
                    "{}: `{key}` has shape {:?}, the model expects {:?}",
                    path.display(),
                    arr.shape(),
                    t.shape
                )));
            }
            t.data = arr.iter().copied().collect();
        }
    }
    Ok(())
}

/// Loads backbone parameters from a checkpoint into a freshly built backbone
/// of the same family. Head parameters in the archive are ignored.
pub fn load_backbone_weights(model: &mut ModelGraph, dir: &Path) -> Result<CheckpointSidecar> {
    let sidecar = read_sidecar(dir)?;
    if sidecar.family != model.family {
        return Err(Error::Lineage(format!(
            "checkpoint {} holds a {} backbone, the model is {}",
            dir.display(),
            sidecar.family,
            model.family
        )));
    }
    load_groups(model, dir, |s| s == Section::Backbone)?;
    Ok(sidecar)
}

/// Rebuilds the full model stored in `dir`, head included.
pub fn load_checkpoint(dir: &Path) -> Result<ModelGraph> {
    let sidecar = read_sidecar(dir)?;
    let graph = backbone_graph(sidecar.family, sidecar.input_size, 0, true, false)?;
    let mut model = ModelGraph {
        family: sidecar.family,
        input_size: sidecar.input_size,
        graph,
        head: None,
        lineage: sidecar.strategy_lineage.clone(),
        freeze: None,
    };
    if let Some(h) = &sidecar.head {
        let task = TaskSpec {
            kind: h.task_kind,
            class_names: h.class_names.clone(),
            activation: h.activation,
        };
        model = attach_head(model, &task, h.dropout_rate, 0)?;
    }
    load_groups(&mut model, dir, |_| true)?;
    Ok(model)
}

/// Local directory of pre-trained weights, laid out as
/// `<root>/imagenet/<family>/{params.npz, model.json}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightStore {
    root: PathBuf,
}

pub const WEIGHTS_ENV: &str = "DAMAGE_TRANSFER_WEIGHTS";

impl Default for WeightStore {
    /// `$DAMAGE_TRANSFER_WEIGHTS`, else `./weights`.
    fn default() -> Self {
        WeightStore::new(
            std::env::var_os(WEIGHTS_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("weights")),
        )
    }
}

impl WeightStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        WeightStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn imagenet_dir(&self, family: Family) -> PathBuf {
        self.root.join("imagenet").join(family.name())
    }

    pub fn resolve_imagenet(&self, family: Family) -> Result<PathBuf> {
        let dir = self.imagenet_dir(family);
        if dir.join(PARAMS_FILE).is_file() && dir.join(SIDECAR_FILE).is_file() {
            Ok(dir)
        } else {
            Err(Error::Resolution {
                what: format!("ImageNet weights for {family}"),
                hint: format!(
                    "expected {} and {} under {}; convert the published weights into a checkpoint there or set {WEIGHTS_ENV}",
                    PARAMS_FILE,
                    SIDECAR_FILE,
                    dir.display()
                ),
            })
        }
    }

    /// Stores `model`'s backbone as the ImageNet weights of its family.
    pub fn install_imagenet(&self, model: &ModelGraph) -> Result<PathBuf> {
        let dir = self.imagenet_dir(model.family);
        let mut headless = model.clone();
        headless.lineage = None;
        save_checkpoint(&headless, &dir)?;
        Ok(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_backbone, build_cbr, BackboneSpec, Weights};

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_cbr(Family::CbrTiny, (32, 32), &TaskSpec::multilabel(6), 11).unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.graph.groups(), m.graph.groups());
        assert_eq!(back.output_dim(), Some(6));
        let side = read_sidecar(dir.path()).unwrap();
        assert_eq!(side.class_names.len(), 6);
        assert!(side.transferable.contains(&"block1_conv".to_string()));
        assert!(!side.transferable.contains(&"head_logits".to_string()));
    }

    #[test]
    fn missing_imagenet_weights_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let store = WeightStore::new(dir.path());
        let spec = BackboneSpec::new(Family::Vgg16, Weights::Imagenet).with_input_size(32, 32);
        match build_backbone(&spec, &store) {
            Err(Error::Resolution { what, hint }) => {
                assert!(what.contains("vgg16"));
                assert!(hint.contains("imagenet"));
            }
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn checkpoint_family_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_cbr(Family::CbrTiny, (32, 32), &TaskSpec::binary(), 1).unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let spec = BackboneSpec::checkpoint(Family::CbrSmall, dir.path()).with_input_size(32, 32);
        assert!(matches!(
            build_backbone(&spec, &WeightStore::default()),
            Err(Error::Lineage(_))
        ));
        let spec = BackboneSpec::checkpoint(Family::CbrTiny, dir.path()).with_input_size(32, 32);
        let b = build_backbone(&spec, &WeightStore::default()).unwrap();
        assert_eq!(b.backbone_digest(), m.backbone_digest());
    }
}
