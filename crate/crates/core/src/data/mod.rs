//! Dataset descriptors, manifests, splits and synthetic toys.

pub mod descriptor;
pub mod images;
pub mod manifest;
pub mod registry;
pub mod split;
pub mod toy;

pub use descriptor::{inspection_dataset, inspection_datasets, DatasetDescriptor, Source, TaskKind};
pub use images::Preprocess;
pub use manifest::{parse_manifest, read_manifest, write_manifest, ManifestRow};
pub use registry::{register_dataset, register_toy, Dataset, DatasetHandle, Item};
pub use split::{
    default_stratified, load_predefined_splits, make_splits, predefined_from_lists, split_indices, subsample_size,
    subsample_training, DataSplit, LowDataPlan, SplitFiles, DEFAULT_RATIOS,
};
pub use toy::{synth_toy_dataset, ToyDataset, ToySpec};
