use std::borrow::Cow;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;

use super::descriptor::{DatasetDescriptor, TaskKind};
use super::images::{write_sample, Preprocess};
use super::manifest::ManifestRow;
use super::toy::ToyDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    pub path: String,
    /// Active class indices, ascending.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
enum ImageStore {
    Files { root: PathBuf },
    Memory(Arc<Vec<RgbImage>>),
}

/// A validated dataset: descriptor, resolved labels, and where its pixels live.
#[derive(Clone, Debug)]
pub struct Dataset {
    descriptor: DatasetDescriptor,
    items: Vec<Item>,
    images: ImageStore,
}

pub type DatasetHandle = Arc<Dataset>;

/// Validates `descriptor` against `manifest` and returns a shareable handle.
///
/// Image paths resolve relative to the current directory; see
/// [`Dataset::with_root`] and [`register_toy`] for other image sources.
pub fn register_dataset(descriptor: DatasetDescriptor, manifest: &[ManifestRow]) -> Result<DatasetHandle> {
    Ok(Arc::new(Dataset::new(descriptor, manifest, PathBuf::new())?))
}

/// Registers a generated toy with its pixels held in memory.
pub fn register_toy(toy: &ToyDataset) -> Result<DatasetHandle> {
    let mut ds = Dataset::new(toy.descriptor.clone(), &toy.manifest, PathBuf::new())?;
    ds.images = ImageStore::Memory(Arc::new(toy.images.clone()));
    Ok(Arc::new(ds))
}

impl Dataset {
    pub fn new(descriptor: DatasetDescriptor, manifest: &[ManifestRow], root: PathBuf) -> Result<Dataset> {
        descriptor.validate()?;
        if manifest.is_empty() {
            return Err(Error::Manifest(format!("`{}`: manifest is empty", descriptor.name)));
        }
        if !descriptor.accepts_count(manifest.len()) {
            return Err(Error::Manifest(format!(
                "`{}` declares {} items but the manifest has {} rows",
                descriptor.name,
                descriptor.item_count,
                manifest.len()
            )));
        }
        let index: HashMap<&str, usize> = descriptor
            .class_names
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let mut items = Vec::with_capacity(manifest.len());
        for (row_no, row) in manifest.iter().enumerate() {
            if row.path.trim().is_empty() {
                return Err(Error::Manifest(format!("row {row_no}: empty image path")));
            }
            let mut labels = Vec::with_capacity(row.labels.len());
            for l in &row.labels {
                let c = *index
                    .get(l.as_str())
                    .ok_or_else(|| Error::Schema(format!("row {row_no} (`{}`): unknown label `{l}`", row.path)))?;
                if !labels.contains(&c) {
                    labels.push(c);
                }
            }
            labels.sort_unstable();
            match (descriptor.task_kind, labels.len()) {
                (_, 0) => return Err(Error::Manifest(format!("row {row_no} (`{}`) has no label", row.path))),
                (TaskKind::Binary, n) if n > 1 => {
                    return Err(Error::Schema(format!(
                        "row {row_no} (`{}`): binary item with {n} labels",
                        row.path
                    )))
                }
                _ => {}
            }
            items.push(Item {
                path: row.path.clone(),
                labels,
            });
        }
        let mut descriptor = descriptor;
        descriptor.item_count = items.len();
        Ok(Dataset {
            descriptor,
            items,
            images: ImageStore::Files { root },
        })
    }

    /// Resolves relative image paths against `root`.
    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Dataset {
        self.images = ImageStore::Files { root: root.into() };
        self
    }

    pub fn descriptor(&self) -> &DatasetDescriptor {
        &self.descriptor
    }

    pub fn name(&self) -> &str {
        &self.descriptor.name
    }

    pub fn task_kind(&self) -> TaskKind {
        self.descriptor.task_kind
    }

    pub fn class_names(&self) -> &[String] {
        &self.descriptor.class_names
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    /// Stratum used for stratified splitting: the class for binary data,
    /// the lowest active label for multilabel data.
    pub fn primary_label(&self, i: usize) -> usize {
        self.items[i].labels[0]
    }

    pub fn strata(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.primary_label(i)).collect()
    }

    pub fn position_of(&self, path: &str) -> Option<usize> {
        self.items.iter().position(|it| it.path == path)
    }

    pub fn image(&self, i: usize) -> Result<Cow<'_, RgbImage>> {
        match &self.images {
            ImageStore::Memory(imgs) => Ok(Cow::Borrowed(&imgs[i])),
            ImageStore::Files { root } => {
                let path = resolve(root, &self.items[i].path);
                Ok(Cow::Owned(
                    image::open(&path).map_err(|e| with_path(e, &path))?.to_rgb8(),
                ))
            }
        }
    }

    /// Target rows for a head with `output_dim` outputs: a single positive
    /// indicator (binary, one logit), one-hot (binary, two outputs), or
    /// multi-hot (multilabel).
    pub fn targets(&self, indices: &[usize], output_dim: usize) -> Result<Vec<f32>> {
        let k = self.descriptor.num_classes();
        let mut out = vec![0.0f32; indices.len() * output_dim];
        for (row, &i) in out.chunks_mut(output_dim).zip(indices) {
            let labels = &self.items[i].labels;
            match (self.task_kind(), output_dim) {
                (TaskKind::Binary, 1) => row[0] = (labels[0] == 1) as u8 as f32,
                (_, d) if d == k => labels.iter().for_each(|&c| row[c] = 1.0),
                (_, d) => {
                    return Err(Error::Argument(format!(
                        "`{}` has {k} classes; a head with {d} outputs does not fit",
                        self.name()
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Loads, resizes and scales the listed items into one NHWC batch.
    pub fn tensor(&self, indices: &[usize], size: (usize, usize), pre: Preprocess) -> Result<Tensor> {
        let len = size.0 * size.1 * 3;
        let samples = crate::par::map(indices.len(), |j| -> Result<Vec<f32>> {
            let mut out = vec![0.0; len];
            write_sample(&*self.image(indices[j])?, size, pre, &mut out);
            Ok(out)
        });
        let mut data = Vec::with_capacity(indices.len() * len);
        for s in samples {
            data.extend_from_slice(&s?);
        }
        let t = Tensor::from_vec([indices.len(), size.0, size.1, 3], data)?;
        Ok(t)
    }
}

fn resolve(root: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn with_path(e: image::ImageError, path: &Path) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::descriptor::{inspection_dataset, Source};
    use crate::data::toy::{synth_toy_dataset, ToySpec};

    fn cds_manifest(healthy: usize, unhealthy: usize) -> Vec<ManifestRow> {
        (0..healthy)
            .map(|i| ManifestRow::new(format!("h/{i}.png"), &["healthy"]))
            .chain((0..unhealthy).map(|i| ManifestRow::new(format!("u/{i}.png"), &["unhealthy"])))
            .collect()
    }

    #[test]
    fn cds_per_class_counts_register() {
        let h = register_dataset(inspection_dataset("CDS").unwrap(), &cds_manifest(691, 337)).unwrap();
        assert_eq!(h.task_kind(), TaskKind::Binary);
        assert_eq!(h.len(), 1028);
        assert!(register_dataset(inspection_dataset("CDS").unwrap(), &cds_manifest(690, 337)).is_ok());
        assert!(matches!(
            register_dataset(inspection_dataset("CDS").unwrap(), &cds_manifest(600, 337)),
            Err(Error::Manifest(_))
        ));
    }

    #[test]
    fn empty_manifest_is_a_manifest_error() {
        assert!(matches!(
            register_dataset(inspection_dataset("BCD").unwrap(), &[]),
            Err(Error::Manifest(_))
        ));
    }

    #[test]
    fn unknown_label_is_a_schema_error() {
        let mut rows = cds_manifest(691, 336);
        rows[3].labels = vec!["rusty".into()];
        assert!(matches!(
            register_dataset(inspection_dataset("CDS").unwrap(), &rows),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn mcds_multilabel_row() {
        let mut d = inspection_dataset("MCDS").unwrap();
        d.item_count = 2;
        let rows = vec![
            ManifestRow::new("a.png", &["crack", "rust straining"]),
            ManifestRow::new("b.png", &["no defects"]),
        ];
        let h = register_dataset(d, &rows).unwrap();
        assert_eq!(h.items()[0].labels, vec![0, 8]);
        let t = h.targets(&[0], 10).unwrap();
        assert_eq!(t.iter().filter(|&&v| v == 1.0).count(), 2);
    }

    #[test]
    fn binary_targets_and_in_memory_pixels() {
        let toy = synth_toy_dataset(&ToySpec::binary(16, 16, 3, 2)).unwrap();
        let h = register_toy(&toy).unwrap();
        assert!(matches!(h.descriptor().source, Source::Generator { .. }));
        assert_eq!(h.targets(&[0, 5], 1).unwrap(), vec![0.0, 1.0]);
        assert_eq!(h.targets(&[5], 2).unwrap(), vec![0.0, 1.0]);
        assert!(h.targets(&[0], 3).is_err());
        let x = h.tensor(&[1, 4], (16, 16), Preprocess::Unit).unwrap();
        assert_eq!(x.shape(), [2, 16, 16, 3]);
        assert_eq!(x.sample(1)[0], toy.images[4].as_raw()[0] as f32 / 255.0);
    }
}
