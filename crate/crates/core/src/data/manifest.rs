//! Flat CSV manifests: header `path,label` (binary) or `path,labels`
//! (multilabel, `;`-joined label sets), one row per item.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::descriptor::TaskKind;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub labels: Vec<String>,
}

impl ManifestRow {
    pub fn new(path: impl Into<String>, labels: &[&str]) -> Self {
        ManifestRow {
            path: path.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn header(kind: TaskKind) -> [&'static str; 2] {
    match kind {
        TaskKind::Binary => ["path", "label"],
        TaskKind::Multilabel => ["path", "labels"],
    }
}

/// Parses manifest text; the task kind is implied by the header.
pub fn parse_manifest(text: &str) -> Result<(TaskKind, Vec<ManifestRow>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let head: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let kind = match head.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["path", "label"] => TaskKind::Binary,
        ["path", "labels"] => TaskKind::Multilabel,
        other => {
            return Err(Error::Manifest(format!(
                "expected header `path,label` or `path,labels`, found `{}`",
                other.join(",")
            )))
        }
    };
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Manifest(format!(
                "row {}: expected 2 fields, found {}",
                line + 1,
                rec.len()
            )));
        }
        let path = rec[0].trim().to_string();
        if path.is_empty() {
            return Err(Error::Manifest(format!("row {}: empty path", line + 1)));
        }
        let labels = rec[1]
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        rows.push(ManifestRow { path, labels });
    }
    Ok((kind, rows))
}

pub fn read_manifest(path: &Path) -> Result<(TaskKind, Vec<ManifestRow>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn render_manifest(kind: TaskKind, rows: &[ManifestRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(kind))?;
    for r in rows {
        w.write_record([r.path.as_str(), r.labels.join(";").as_str()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Manifest(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_manifest(path: &Path, kind: TaskKind, rows: &[ManifestRow]) -> Result<()> {
    std::fs::write(path, render_manifest(kind, rows)?).map_err(|e| Error::io(path, e))
}
