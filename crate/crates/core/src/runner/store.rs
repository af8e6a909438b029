//! Append-only JSON-lines results store.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::grid::CellJob;
use crate::error::{Error, Result};
use crate::eval::RunResult;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";

/// One completed run of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell_key: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub score_digest: String,
    pub config_hash: String,
    pub cell: CellJob,
}

impl RunRecord {
    pub fn new(cell: &CellJob, result: &RunResult, config_hash: &str) -> Self {
        RunRecord {
            cell_key: cell.key.clone(),
            seed: result.seed,
            metrics: result.metrics.clone(),
            score_digest: result.score_digest(),
            config_hash: config_hash.to_string(),
            cell: cell.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub cell_key: String,
    pub seed: u64,
    pub error: String,
    pub config_hash: String,
    pub cell: CellJob,
}

#[derive(Clone, Debug)]
pub struct ResultsStore {
    dir: PathBuf,
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            // a torn final line is what an interrupted append leaves behind
            Err(e) if i + 1 == lines.len() && !text.ends_with('\n') => {
                log::warn!("{}: ignoring incomplete last line ({e})", path.display());
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn append_line<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = OpenOptions::new()
        .create(true)
        .truncate(false)
        .read(true)
        .write(true)
        .open(path)
        .map_err(io)?;
    let mut text = Vec::new();
    f.read_to_end(&mut text).map_err(io)?;
    if text.last().is_some_and(|b| *b != b'\n') {
        // drop the fragment an interrupted append left behind
        let keep = text.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        log::warn!(
            "{}: discarding {} bytes of an incomplete record",
            path.display(),
            text.len() - keep
        );
        f.set_len(keep as u64).map_err(io)?;
    }
    f.seek(SeekFrom::End(0)).map_err(io)?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(io)?;
    f.sync_data().map_err(io)
}

impl ResultsStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<ResultsStore> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ResultsStore { dir })
    }

    /// Opens an existing store without creating anything.
    pub fn existing(dir: impl Into<PathBuf>) -> ResultsStore {
        ResultsStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn results_path(&self) -> PathBuf {
        self.dir.join(RESULTS_FILE)
    }

    pub fn failures_path(&self) -> PathBuf {
        self.dir.join(FAILURES_FILE)
    }

    pub fn append_result(&self, r: &RunRecord) -> Result<()> {
        append_line(&self.results_path(), r)
    }

    pub fn append_failure(&self, r: &FailureRecord) -> Result<()> {
        append_line(&self.failures_path(), r)
    }

    pub fn results(&self) -> Result<Vec<RunRecord>> {
        read_lines(&self.results_path())
    }

    pub fn failures(&self) -> Result<Vec<FailureRecord>> {
        read_lines(&self.failures_path())
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.results()?.is_empty() && self.failures()?.is_empty())
    }

    /// `(cell_key, seed)` pairs with a stored result.
    pub fn completed(&self) -> Result<BTreeSet<(String, u64)>> {
        Ok(self.results()?.into_iter().map(|r| (r.cell_key, r.seed)).collect())
    }
}
