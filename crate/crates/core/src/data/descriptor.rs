use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::toy::ToySpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// One label per item; `class_names[1]` is the positive (damage) class.
    Binary,
    /// Any subset of the classes may be active on an item.
    Multilabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Source {
    Manifest {
        path: PathBuf,
    },
    Generator {
        spec: ToySpec,
    },
    /// Rows handed over directly by the caller.
    Inline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub task_kind: TaskKind,
    pub class_names: Vec<String>,
    pub item_count: usize,
    pub source: Source,
    #[serde(default)]
    pub has_predefined_splits: bool,
    /// Other item counts published for this dataset; some sources list
    /// totals that disagree with their per-class counts.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alternate_counts: Vec<usize>,
}

impl DatasetDescriptor {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Checks the schema invariants that do not depend on the manifest.
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Schema("dataset name is empty".into()));
        }
        if self.class_names.is_empty() {
            return Err(Error::Schema(format!("`{}` declares no classes", self.name)));
        }
        for (i, c) in self.class_names.iter().enumerate() {
            if c.trim().is_empty() {
                return Err(Error::Schema(format!("`{}`: class {i} has an empty name", self.name)));
            }
            if c.contains(';') {
                return Err(Error::Schema(format!(
                    "`{}`: class name `{c}` contains the label separator",
                    self.name
                )));
            }
            if self.class_names[..i].contains(c) {
                return Err(Error::Schema(format!("`{}`: duplicate class `{c}`", self.name)));
            }
        }
        if self.task_kind == TaskKind::Binary && self.class_names.len() != 2 {
            return Err(Error::Schema(format!(
                "`{}` is binary but declares {} classes",
                self.name,
                self.class_names.len()
            )));
        }
        if self.item_count == 0 {
            return Err(Error::Schema(format!("`{}`: item_count must be positive", self.name)));
        }
        Ok(())
    }

    pub fn accepts_count(&self, rows: usize) -> bool {
        rows == self.item_count || self.alternate_counts.contains(&rows)
    }
}

fn published(
    name: &str,
    kind: TaskKind,
    classes: &[&str],
    count: usize,
    predefined: bool,
    alternates: &[usize],
) -> DatasetDescriptor {
    DatasetDescriptor {
        name: name.into(),
        task_kind: kind,
        class_names: classes.iter().map(|s| s.to_string()).collect(),
        item_count: count,
        source: Source::Inline,
        has_predefined_splits: predefined,
        alternate_counts: alternates.to_vec(),
    }
}

/// The six public bridge-inspection datasets, with their published sizes and
/// class schemas. Binary schemas list the negative class first.
pub fn inspection_datasets() -> Vec<DatasetDescriptor> {
    use TaskKind::*;
    vec![
        // per-class counts 691 + 337 sum to 1028
        published("CDS", Binary, &["healthy", "unhealthy"], 1027, false, &[1028]),
        published("SDNETv1", Binary, &["uncracked", "crack"], 13_620, false, &[]),
        published("BCD", Binary, &["background", "crack"], 5390, false, &[]),
        // also described as 60,000 balanced images
        published("ICCD", Binary, &["uncracked", "crack"], 60_010, true, &[60_000]),
        published(
            "MCDS",
            Multilabel,
            &[
                "crack",
                "efflorescence",
                "scaling",
                "spalling",
                "general defects",
                "no defects",
                "exposed reinforcement",
                "no exposed reinforcement",
                "rust straining",
                "no rust straining",
            ],
            2411,
            false,
            &[],
        ),
        published(
            "CODEBRIM",
            Multilabel,
            &[
                "cracks",
                "spalling",
                "efflorescence",
                "exposed bars",
                "corrosion stain",
                "background",
            ],
            8304,
            true,
            &[],
        ),
    ]
}

pub fn inspection_dataset(name: &str) -> Option<DatasetDescriptor> {
    inspection_datasets()
        .into_iter()
        .find(|d| d.name.eq_ignore_ascii_case(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_matches_published_overview() {
        let expected = [
            ("CDS", 1027, 2, TaskKind::Binary),
            ("SDNETv1", 13_620, 2, TaskKind::Binary),
            ("BCD", 5390, 2, TaskKind::Binary),
            ("ICCD", 60_010, 2, TaskKind::Binary),
            ("MCDS", 2411, 10, TaskKind::Multilabel),
            ("CODEBRIM", 8304, 6, TaskKind::Multilabel),
        ];
        let all = inspection_datasets();
        assert_eq!(all.len(), 6);
        for (d, (name, n, k, kind)) in all.iter().zip(expected) {
            assert_eq!(
                (d.name.as_str(), d.item_count, d.num_classes(), d.task_kind),
                (name, n, k, kind)
            );
            d.validate().unwrap();
        }
        assert!(inspection_dataset("iccd").unwrap().has_predefined_splits);
        assert!(inspection_dataset("codebrim").unwrap().has_predefined_splits);
    }

    #[test]
    fn binary_needs_two_classes() {
        let mut d = inspection_dataset("CDS").unwrap();
        d.class_names.push("third".into());
        assert!(matches!(d.validate(), Err(Error::Schema(_))));
    }

    #[test]
    fn duplicate_classes_rejected() {
        let mut d = inspection_dataset("MCDS").unwrap();
        d.class_names[1] = "crack".into();
        assert!(matches!(d.validate(), Err(Error::Schema(_))));
    }
}
