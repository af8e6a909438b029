//! Tables (CSV and aligned text) and plots from a results store.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use super::config::ReferenceRow;
use super::exec::{cell_dir_name, CONFIG_FILE};
use super::grid::CellJob;
use super::plot::LineChart;
use super::store::{FailureRecord, ResultsStore, RunRecord};
use crate::error::{Error, Result};
use crate::eval::{MetricStat, AUC_ROC};
use crate::train::TrainHistory;
use crate::zoo::Family;

/// Aggregated view of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub cell: CellJob,
    pub metrics: BTreeMap<String, MetricStat>,
    pub runs: usize,
    /// Seeds whose latest attempt failed.
    pub failed_seeds: Vec<u64>,
    /// Fewer runs than expected, failed runs, or a metric missing from some run.
    pub partial: bool,
}

/// Groups records by cell (first-appearance order) and aggregates them.
/// `expected_runs` marks cells with fewer completed runs as partial.
pub fn summarize(results: &[RunRecord], failures: &[FailureRecord], expected_runs: Option<usize>) -> Vec<CellSummary> {
    let mut order: Vec<CellJob> = Vec::new();
    let mut by_key: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in results {
        if !by_key.contains_key(r.cell_key.as_str()) && !order.iter().any(|c| c.key == r.cell_key) {
            order.push(r.cell.clone());
        }
        by_key.entry(r.cell_key.as_str()).or_default().push(r);
    }
    for f in failures {
        if !order.iter().any(|c| c.key == f.cell_key) {
            order.push(f.cell.clone());
        }
    }
    order
        .into_iter()
        .map(|cell| {
            let runs = by_key.get(cell.key.as_str()).cloned().unwrap_or_default();
            let ok_seeds: BTreeSet<u64> = runs.iter().map(|r| r.seed).collect();
            let failed_seeds: Vec<u64> = failures
                .iter()
                .filter(|f| f.cell_key == cell.key && !ok_seeds.contains(&f.seed))
                .map(|f| f.seed)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in &runs {
                for (k, v) in &r.metrics {
                    values.entry(k.clone()).or_default().push(*v);
                }
            }
            let incomplete_metric = values.values().any(|v| v.len() != runs.len());
            let metrics = values
                .into_iter()
                .filter_map(|(k, v)| MetricStat::from_values(&v).map(|s| (k, s)))
                .collect();
            let short = expected_runs.is_some_and(|n| runs.len() < n);
            CellSummary {
                partial: !failed_seeds.is_empty() || incomplete_metric || short || runs.is_empty(),
                cell,
                metrics,
                runs: runs.len(),
                failed_seeds,
            }
        })
        .collect()
}

/// Marks every entry equal to the largest present value.
pub fn bold_argmax(means: &[Option<f64>]) -> Vec<bool> {
    let best = means.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    means.iter().map(|m| m.is_some_and(|v| v == best)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableCell {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub bold: bool,
    pub partial: bool,
}

impl TableCell {
    pub fn text(&self) -> String {
        let body = match (self.mean, self.std) {
            (Some(m), Some(s)) => crate::eval::format_mean_std(m, s),
            _ => "n/a".to_string(),
        };
        let body = if self.bold { format!("**{body}**") } else { body };
        if self.partial {
            format!("{body} †")
        } else {
            body
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub slug: String,
    pub title: String,
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<TableCell>>)>,
    /// User-supplied rows, shown verbatim and never highlighted.
    pub references: Vec<(String, Vec<Option<String>>)>,
}

impl Table {
    fn grid(&self) -> Vec<Vec<String>> {
        let mut out = vec![std::iter::once(self.row_header.clone())
            .chain(self.columns.iter().cloned())
            .collect()];
        for (label, cells) in &self.rows {
            let mut row = vec![label.clone()];
            row.extend(
                cells
                    .iter()
                    .map(|c| c.as_ref().map_or_else(|| "-".to_string(), TableCell::text)),
            );
            out.push(row);
        }
        for (label, cells) in &self.references {
            let mut row = vec![format!("{label} (reference)")];
            row.extend(cells.iter().map(|c| c.clone().unwrap_or_else(|| "-".into())));
            out.push(row);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let grid = self.grid();
        let ncol = grid[0].len();
        let widths: Vec<usize> = (0..ncol)
            .map(|j| grid.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = format!("{}\n", self.title);
        for (i, row) in grid.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let pad = widths[j] - c.chars().count();
                    if j == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                s.push_str(&rule.join("  "));
                s.push('\n');
            }
        }
        s.push_str("** best mean in its column; † partial cell (failed or missing runs)\n");
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.grid() {
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

fn push_unique<T: PartialEq + Clone>(v: &mut Vec<T>, x: &T) {
    if !v.contains(x) {
        v.push(x.clone());
    }
}

pub fn fraction_label(f: f64) -> String {
    let pct = (f * 100.0 * 1e6).round() / 1e6;
    format!("{pct}%")
}

fn build<'a>(
    slug: String,
    title: String,
    row_header: &str,
    columns: Vec<String>,
    row_labels: Vec<String>,
    lookup: impl Fn(&str, usize) -> Option<&'a CellSummary>,
    metric: &str,
) -> Table {
    let mut rows: Vec<(String, Vec<Option<TableCell>>)> = row_labels
        .iter()
        .map(|label| {
            let cells = (0..columns.len())
                .map(|j| {
                    lookup(label, j).map(|s| {
                        let stat = s.metrics.get(metric);
                        TableCell {
                            mean: stat.map(|m| m.mean),
                            std: stat.map(|m| m.std),
                            bold: false,
                            partial: s.partial || stat.is_none_or(|m| m.n < s.runs),
                        }
                    })
                })
                .collect();
            (label.clone(), cells)
        })
        .collect();
    for j in 0..columns.len() {
        let means: Vec<Option<f64>> = rows.iter().map(|(_, c)| c[j].as_ref().and_then(|c| c.mean)).collect();
        for (i, b) in bold_argmax(&means).into_iter().enumerate() {
            if let Some(c) = rows[i].1[j].as_mut() {
                c.bold = b;
            }
        }
    }
    Table {
        slug,
        title,
        row_header: row_header.into(),
        columns,
        rows,
        references: Vec::new(),
    }
}

/// One table per backbone over full-data cells (rows: initializations,
/// columns: datasets) and one per (dataset, backbone) low-data sweep (rows:
/// initializations, columns: fractions). Bold marks the best mean `metric`
/// in each column.
pub fn build_tables(cells: &[CellSummary], metric: &str, references: &[ReferenceRow]) -> Vec<Table> {
    let mut tables = Vec::new();
    let mut backbones: Vec<Family> = Vec::new();
    for c in cells.iter().filter(|c| c.cell.fraction.is_none()) {
        push_unique(&mut backbones, &c.cell.backbone);
    }
    for bb in backbones {
        let mine: Vec<&CellSummary> = cells
            .iter()
            .filter(|c| c.cell.fraction.is_none() && c.cell.backbone == bb)
            .collect();
        let (mut datasets, mut inits) = (Vec::new(), Vec::new());
        for c in &mine {
            push_unique(&mut datasets, &c.cell.dataset);
            push_unique(&mut inits, &c.cell.initialization());
        }
        let mut t = build(
            format!("table_{bb}"),
            format!("{metric} (mean ± std), backbone {bb}"),
            "initialization",
            datasets.clone(),
            inits,
            |init, j| {
                mine.iter()
                    .copied()
                    .find(|c| c.cell.initialization() == init && c.cell.dataset == datasets[j])
            },
            metric,
        );
        let mut labels: Vec<String> = Vec::new();
        for r in references.iter().filter(|r| datasets.contains(&r.dataset)) {
            push_unique(&mut labels, &r.label);
        }
        t.references = labels
            .into_iter()
            .map(|label| {
                let vals = datasets
                    .iter()
                    .map(|d| {
                        references
                            .iter()
                            .find(|r| r.label == label && &r.dataset == d)
                            .map(|r| r.value.clone())
                    })
                    .collect();
                (label, vals)
            })
            .collect();
        tables.push(t);
    }
    let mut sweeps: Vec<(String, Family)> = Vec::new();
    for c in cells.iter().filter(|c| c.cell.fraction.is_some()) {
        push_unique(&mut sweeps, &(c.cell.dataset.clone(), c.cell.backbone));
    }
    for (ds, bb) in sweeps {
        let mine: Vec<&CellSummary> = cells
            .iter()
            .filter(|c| c.cell.fraction.is_some() && c.cell.dataset == ds && c.cell.backbone == bb)
            .collect();
        let mut fractions: Vec<f64> = Vec::new();
        let mut inits = Vec::new();
        for c in &mine {
            push_unique(&mut fractions, &c.cell.fraction.expect("sweep cell"));
            push_unique(&mut inits, &c.cell.initialization());
        }
        fractions.sort_by(f64::total_cmp);
        tables.push(build(
            format!("lowdata_{}_{bb}", cell_dir_name(&ds)),
            format!("{metric} (mean ± std) vs training fraction, {ds}, backbone {bb}"),
            "initialization",
            fractions.iter().map(|f| fraction_label(*f)).collect(),
            inits,
            |init, j| {
                mine.iter()
                    .copied()
                    .find(|c| c.cell.initialization() == init && c.cell.fraction == Some(fractions[j]))
            },
            metric,
        ));
    }
    tables
}

fn summary_csv(cells: &[CellSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "cell_key", "dataset", "backbone", "strategy", "upstream", "fraction", "metric", "mean", "std", "min", "max",
        "n", "runs", "failed", "partial", "display",
    ])?;
    for c in cells {
        for (m, s) in &c.metrics {
            w.write_record([
                c.cell.key.clone(),
                c.cell.dataset.clone(),
                c.cell.backbone.to_string(),
                c.cell.strategy.to_string(),
                c.cell.upstream.clone().unwrap_or_default(),
                c.cell.fraction.map(|f| f.to_string()).unwrap_or_default(),
                m.clone(),
                s.mean.to_string(),
                s.std.to_string(),
                s.min.to_string(),
                s.max.to_string(),
                s.n.to_string(),
                c.runs.to_string(),
                c.failed_seeds.len().to_string(),
                c.partial.to_string(),
                s.display(),
            ])?;
        }
        if c.metrics.is_empty() {
            w.write_record([
                c.cell.key.as_str(),
                &c.cell.dataset,
                "",
                "",
                "",
                "",
                "",
                "",
                "",
                "",
                "",
                "",
                "0",
                &c.failed_seeds.len().to_string(),
                "true",
                "n/a",
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Mean per epoch over seeds (epochs missing from some runs average the rest).
fn mean_curve(histories: &[TrainHistory], pick: impl Fn(&crate::train::EpochRecord) -> Option<f64>) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for h in histories {
        for r in &h.records {
            if let Some(v) = pick(r).filter(|v| v.is_finite()) {
                let e = acc.entry(r.epoch).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    acc.into_iter().map(|(ep, (s, n))| (ep as f64, s / n as f64)).collect()
}

fn histories(store_dir: &Path, key: &str) -> Vec<TrainHistory> {
    let dir = store_dir.join("runs").join(cell_dir_name(key));
    let Ok(entries) = std::fs::read_dir(&dir) else {
        return Vec::new();
    };
    let mut paths: Vec<PathBuf> = entries
        .flatten()
        .map(|e| e.path().join("history.jsonl"))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().filter_map(|p| TrainHistory::read_jsonl(p).ok()).collect()
}

#[derive(Clone, Debug, Default)]
pub struct ReportOutputs {
    pub tables: Vec<Table>,
    pub files: Vec<PathBuf>,
    pub config_hashes: Vec<String>,
}

/// Reads the store in `store_dir` and writes tables and plots to `out_dir`.
pub fn report(store_dir: &Path, out_dir: &Path, references: &[ReferenceRow]) -> Result<ReportOutputs> {
    let store = ResultsStore::existing(store_dir);
    let results = store.results()?;
    let failures = store.failures()?;
    if results.is_empty() && failures.is_empty() {
        return Err(Error::Report(format!("no results stored in {}", store_dir.display())));
    }
    let expected = std::fs::read_to_string(store_dir.join(CONFIG_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["spec"]["train"]["runs"].as_u64())
        .map(|n| n as usize);
    let hashes: BTreeSet<String> = results
        .iter()
        .map(|r| r.config_hash.clone())
        .chain(failures.iter().map(|f| f.config_hash.clone()))
        .collect();
    if hashes.len() > 1 {
        log::warn!("store mixes results from {} different configurations", hashes.len());
    }
    let cells = summarize(&results, &failures, expected);
    let tables = build_tables(&cells, AUC_ROC, references);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut write = |name: String, body: String| -> Result<()> {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        files.push(p);
        Ok(())
    };
    let header: String = hashes.iter().map(|h| format!("config_hash: {h}\n")).collect();
    write("summary.csv".into(), summary_csv(&cells)?)?;
    let mut all = header.clone();
    for t in &tables {
        write(format!("{}.csv", t.slug), t.to_csv()?)?;
        let text = format!("{header}{}", t.to_text());
        all.push('\n');
        all.push_str(&t.to_text());
        write(format!("{}.txt", t.slug), text)?;
    }
    write("report.txt".into(), all)?;

    // AUC vs fraction, one line per initialization
    let mut sweeps: Vec<(String, Family)> = Vec::new();
    for c in cells.iter().filter(|c| c.cell.fraction.is_some()) {
        push_unique(&mut sweeps, &(c.cell.dataset.clone(), c.cell.backbone));
    }
    for (ds, bb) in &sweeps {
        let mut chart = LineChart::new(
            &format!("{ds} {bb}: test auc vs training fraction"),
            "fraction of training split",
            "auc",
        );
        let mut inits = Vec::new();
        for c in cells
            .iter()
            .filter(|c| &c.cell.dataset == ds && c.cell.backbone == *bb && c.cell.fraction.is_some())
        {
            push_unique(&mut inits, &c.cell.initialization());
        }
        for init in inits {
            let mut pts: Vec<(f64, f64)> = cells
                .iter()
                .filter(|c| &c.cell.dataset == ds && c.cell.backbone == *bb && c.cell.initialization() == init)
                .filter_map(|c| Some((c.cell.fraction?, c.metrics.get(AUC_ROC)?.mean)))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            chart = chart.series(&init, pts);
        }
        let p = out_dir.join(format!("lowdata_{}_{bb}.png", cell_dir_name(ds)));
        chart.save(&p)?;
        files.push(p);
    }

    // training curves: per (dataset, backbone, fraction), train and val loss per initialization
    let mut groups: Vec<(String, Family, Option<u64>)> = Vec::new();
    for c in &cells {
        push_unique(
            &mut groups,
            &(
                c.cell.dataset.clone(),
                c.cell.backbone,
                c.cell.fraction.map(f64::to_bits),
            ),
        );
    }
    for (ds, bb, frac) in groups {
        let mut chart = LineChart::new(&format!("{ds} {bb}: loss per epoch"), "epoch", "loss");
        for c in cells
            .iter()
            .filter(|c| c.cell.dataset == ds && c.cell.backbone == bb && c.cell.fraction.map(f64::to_bits) == frac)
        {
            let hs = histories(store_dir, &c.cell.key);
            if hs.is_empty() {
                continue;
            }
            let init = c.cell.initialization();
            chart = chart
                .series(&format!("{init} train"), mean_curve(&hs, |r| Some(r.train_loss)))
                .series(&format!("{init} val"), mean_curve(&hs, |r| Some(r.val_loss)));
        }
        if chart.series.is_empty() {
            continue;
        }
        let frac_tag = frac.map_or_else(|| "full".to_string(), |b| f64::from_bits(b).to_string());
        let p = out_dir.join(format!(
            "curves_{}_{bb}_{}.png",
            cell_dir_name(&ds),
            cell_dir_name(&frac_tag)
        ));
        chart.save(&p)?;
        files.push(p);
    }
    Ok(ReportOutputs {
        tables,
        files,
        config_hashes: hashes.into_iter().collect(),
    })
}
