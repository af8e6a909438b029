mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use common::*;
use damage_transfer::data::LowDataPlan;
use damage_transfer::eval::{RunResult, AUC_ROC};
use damage_transfer::runner::{
    bold_argmax, cell_key, expand_grid, report, run_grid, summarize, sweep_lowdata, CellJob, ExperimentSpec,
    ReferenceRow, ResultsStore, RunOptions, RunRecord, TrainingExecutor,
};
use damage_transfer::transfer::StrategyMode;
use damage_transfer::zoo::Family;
use damage_transfer::Error;

fn six() -> Vec<&'static str> {
    vec!["a", "b", "c", "d", "e", "f"]
}

#[test]
fn in_domain_grid_drops_the_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let spec = toy_spec(dir.path(), &six(), &["in_domain"], 1);
    let grid = expand_grid(&spec).unwrap();
    assert_eq!(grid.cells.len(), 30);
    assert_eq!(grid.excluded.len(), 6);
    assert!(grid
        .cells
        .iter()
        .all(|c| c.upstream.as_deref() != Some(c.dataset.as_str())));
    assert_eq!(grid, expand_grid(&spec).unwrap());
}

#[test]
fn single_cell_and_spec_errors() {
    let dir = tempfile::tempdir().unwrap();
    let spec = toy_spec(dir.path(), &["a"], &["random_init"], 1);
    let grid = expand_grid(&spec).unwrap();
    assert_eq!(grid.keys(), vec!["a:cbr_tiny:random_init:-:full"]);

    let mut unknown = spec.clone();
    unknown.grid.datasets.push("missing".into());
    assert!(matches!(expand_grid(&unknown), Err(Error::Spec(_))));

    let mut bad_strategy = spec.clone();
    bad_strategy.grid.strategies = vec!["warm_start".into()];
    assert!(matches!(expand_grid(&bad_strategy), Err(Error::Spec(_))));

    // cbr has no ImageNet weights, so this grid has nothing left
    let mut empty = spec.clone();
    empty.grid.strategies = vec!["cross_domain_fe".into()];
    assert!(matches!(expand_grid(&empty), Err(Error::Spec(_))));

    let mut no_axis = spec;
    no_axis.grid.datasets.clear();
    assert!(matches!(expand_grid(&no_axis), Err(Error::Spec(_))));
}

#[test]
fn cell_keys_are_stable() {
    assert_eq!(
        cell_key("CDS", Family::Vgg16, StrategyMode::InDomain, Some("MCDS"), Some(0.05)),
        "CDS:vgg16:in_domain:MCDS:0.05"
    );
    assert_eq!(
        CellJob::new("CDS", Family::CbrTiny, StrategyMode::RandomInit, None, None).key,
        "CDS:cbr_tiny:random_init:-:full"
    );
}

#[test]
fn run_persists_every_result_and_resume_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let spec = toy_spec(dir.path(), &["a", "b"], &["random_init", "in_domain"], 2);
    let mut exec = FakeExecutor::default();
    let first = run_grid(&spec, &RunOptions::default(), &mut exec).unwrap();
    assert_eq!(first.executed.len(), 8);
    let store = ResultsStore::existing(dir.path());
    let records = store.results().unwrap();
    assert_eq!(records.len(), 8);
    assert!(records
        .iter()
        .all(|r| r.config_hash == spec.config_hash() && r.score_digest.len() == 64));

    // a non-empty store needs an explicit resume
    assert!(matches!(
        run_grid(&spec, &RunOptions::default(), &mut exec),
        Err(Error::State(_))
    ));
    let resume = RunOptions {
        resume: true,
        ..RunOptions::default()
    };
    let mut again = FakeExecutor::default();
    let second = run_grid(&spec, &resume, &mut again).unwrap();
    assert!(again.calls.is_empty());
    assert_eq!(second.skipped.len(), 8);
    assert_eq!(store.results().unwrap().len(), 8);
}

#[test]
fn crash_resume_executes_each_run_exactly_once() {
    let dir = tempfile::tempdir().unwrap();
    let spec = toy_spec(dir.path(), &["a", "b", "c"], &["random_init", "in_domain"], 2);
    let grid = expand_grid(&spec).unwrap();
    let expected: Vec<(String, u64)> = grid
        .cells
        .iter()
        .flat_map(|c| (0..2).map(move |s| (c.key.clone(), s)))
        .collect();
    let mut crashing = FakeExecutor {
        crash_after: Some(5),
        ..FakeExecutor::default()
    };
    let crashed = catch_unwind(AssertUnwindSafe(|| {
        run_grid(&spec, &RunOptions::default(), &mut crashing)
    }));
    assert!(crashed.is_err());
    assert_eq!(crashing.calls.len(), 5);

    let resume = RunOptions {
        resume: true,
        ..RunOptions::default()
    };
    let mut rest = FakeExecutor::default();
    run_grid(&spec, &resume, &mut rest).unwrap();
    let mut all: Vec<(String, u64)> = crashing.calls.iter().chain(&rest.calls).cloned().collect();
    all.sort();
    let mut want = expected.clone();
    want.sort();
    assert_eq!(all, want);
    let stored: Vec<(String, u64)> = ResultsStore::existing(dir.path())
        .results()
        .unwrap()
        .into_iter()
        .map(|r| (r.cell_key, r.seed))
        .collect();
    assert_eq!(stored.len(), expected.len());
}

#[test]
fn torn_last_line_is_ignored_and_repaired() {
    let dir = tempfile::tempdir().unwrap();
    let spec = toy_spec(dir.path(), &["a"], &["random_init"], 2);
    run_grid(&spec, &RunOptions::default(), &mut FakeExecutor::default()).unwrap();
    let path = dir.path().join("results.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let keep = text.lines().next().unwrap();
    std::fs::write(&path, format!("{keep}\n{{\"cell_key\": \"a:cbr")).unwrap();
    let resume = RunOptions {
        resume: true,
        ..RunOptions::default()
    };
    let mut exec = FakeExecutor::default();
    run_grid(&spec, &resume, &mut exec).unwrap();
    assert_eq!(exec.calls.len(), 1);
    assert_eq!(ResultsStore::existing(dir.path()).results().unwrap().len(), 2);
}

#[test]
fn failures_are_recorded_and_retried_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let spec = toy_spec(dir.path(), &["a"], &["random_init"], 2);
    let key = "a:cbr_tiny:random_init:-:full".to_string();
    let mut exec = FakeExecutor {
        failing: vec![key.clone()],
        ..FakeExecutor::default()
    };
    let summary = run_grid(&spec, &RunOptions::default(), &mut exec).unwrap();
    assert_eq!(summary.failed.len(), 2);
    assert!(summary.failed[0].2.contains("install them"));
    let store = ResultsStore::existing(dir.path());
    assert_eq!(store.failures().unwrap().len(), 2);
    let out = report(dir.path(), &dir.path().join("report"), &[]).unwrap();
    assert!(out.tables[0].to_text().contains("n/a †"));

    let resume = RunOptions {
        resume: true,
        ..RunOptions::default()
    };
    let mut fixed = FakeExecutor::default();
    run_grid(&spec, &resume, &mut fixed).unwrap();
    assert_eq!(fixed.calls.len(), 2);
}

#[test]
fn cell_filter_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let spec = toy_spec(dir.path(), &["a", "b"], &["random_init"], 2);
    let opts = RunOptions {
        cells: Some(vec!["b:cbr_tiny:random_init:-:full".into()]),
        seed: Some(40),
        ..RunOptions::default()
    };
    let mut exec = FakeExecutor::default();
    run_grid(&spec, &opts, &mut exec).unwrap();
    assert_eq!(
        exec.calls,
        vec![
            ("b:cbr_tiny:random_init:-:full".to_string(), 40),
            ("b:cbr_tiny:random_init:-:full".to_string(), 41)
        ]
    );
    let bad = RunOptions {
        cells: Some(vec!["zzz".into()]),
        resume: true,
        ..RunOptions::default()
    };
    assert!(matches!(run_grid(&spec, &bad, &mut exec), Err(Error::Spec(_))));
}

#[test]
fn low_data_sweep_keys_results_by_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = toy_spec(dir.path(), &["a"], &["random_init"], 2);
    spec.low_data = Some(LowDataPlan {
        fractions: vec![0.05, 0.1, 0.2, 0.5, 1.0],
        seed: 3,
    });
    let mut exec = FakeExecutor::default();
    let s = sweep_lowdata(&spec, &RunOptions::default(), &mut exec).unwrap();
    assert_eq!(s.executed.len(), 10);
    let fractions: std::collections::BTreeSet<String> = ResultsStore::existing(dir.path())
        .results()
        .unwrap()
        .iter()
        .map(|r| r.cell.fraction.unwrap().to_string())
        .collect();
    assert_eq!(fractions.len(), 5);
    let out = report(dir.path(), &dir.path().join("report"), &[]).unwrap();
    assert!(out.files.iter().any(|f| f
        .file_name()
        .unwrap()
        .to_string_lossy()
        .starts_with("lowdata_a_cbr_tiny")));
    let low = out.tables.iter().find(|t| t.slug.starts_with("lowdata")).unwrap();
    assert_eq!(low.columns, vec!["5%", "10%", "20%", "50%", "100%"]);
}

fn record(key_ds: &str, strategy: StrategyMode, seed: u64, auc: f64) -> RunRecord {
    let cell = CellJob::new(key_ds, Family::CbrTiny, strategy, None, None);
    let mut metrics = BTreeMap::new();
    metrics.insert(AUC_ROC.to_string(), auc);
    let r = RunResult {
        strategy: strategy.to_string(),
        dataset: key_ds.into(),
        seed,
        scores: vec![],
        metrics,
    };
    RunRecord::new(&cell, &r, "h")
}

#[test]
fn report_formats_mean_std_and_bolds_argmax() {
    let dir = tempfile::tempdir().unwrap();
    let store = ResultsStore::open(dir.path()).unwrap();
    for (s, v) in [0.80, 0.78, 0.79, 0.81, 0.77].iter().enumerate() {
        store
            .append_result(&record("X", StrategyMode::RandomInit, s as u64, *v))
            .unwrap();
    }
    for (s, v) in [0.82, 0.83, 0.81].iter().enumerate() {
        store
            .append_result(&record("X", StrategyMode::InDomain, s as u64, *v))
            .unwrap();
    }
    let refs = vec![ReferenceRow {
        label: "published".into(),
        dataset: "X".into(),
        value: "0.99".into(),
    }];
    let out = report(dir.path(), &dir.path().join("r"), &refs).unwrap();
    let t = &out.tables[0];
    let text = t.to_text();
    assert!(text.contains("0.79 ± 0.01"), "{text}");
    assert!(text.contains("**0.82 ± 0.01**"), "{text}");
    assert!(!text.contains("**0.79"));
    assert!(text.contains("published (reference)") && text.contains("0.99"));
    assert!(t.to_csv().unwrap().contains("**0.82 ± 0.01**"));
    for name in ["summary.csv", "report.txt", "table_cbr_tiny.csv", "table_cbr_tiny.txt"] {
        assert!(dir.path().join("r").join(name).is_file(), "{name}");
    }
    assert!(std::fs::read_to_string(dir.path().join("r/report.txt"))
        .unwrap()
        .contains("config_hash: h"));
}

#[test]
fn bolding_is_the_argmax() {
    assert_eq!(bold_argmax(&[Some(0.79), Some(0.82), None]), vec![false, true, false]);
    assert_eq!(bold_argmax(&[None, None]), vec![false, false]);
    let cells = summarize(&[record("X", StrategyMode::RandomInit, 0, 0.7)], &[], Some(3));
    assert!(cells[0].partial);
}

#[test]
fn empty_store_is_a_report_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        report(dir.path(), &dir.path().join("r"), &[]),
        Err(Error::Report(_))
    ));
}

#[test]
fn spec_files_round_trip_and_hash() {
    let text = r#"
name = "demo"
output_dir = "out"
split_seed = 7
[grid]
datasets = ["CDS"]
backbones = ["cbr_tiny"]
strategies = ["random_init"]
[low_data]
fractions = [0.05, 0.1]
seed = 1
[train]
epochs = 2
[[dataset]]
name = "CDS"
manifest = "cds/manifest.csv"
[[reference]]
label = "published baseline"
dataset = "CDS"
value = "0.90"
"#;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, text).unwrap();
    let spec = ExperimentSpec::load(&path).unwrap();
    assert_eq!(spec.output_dir, dir.path().join("out"));
    assert_eq!(
        spec.datasets[0].manifest.as_deref(),
        Some(dir.path().join("cds/manifest.csv").as_path())
    );
    assert_eq!(spec.train.epochs, 2);
    assert_eq!(spec.train.batch_size, 64);
    let mut moved = spec.clone();
    moved.output_dir = "elsewhere".into();
    assert_eq!(moved.config_hash(), spec.config_hash());
    let mut changed = spec.clone();
    changed.train.epochs = 3;
    assert_ne!(changed.config_hash(), spec.config_hash());
    assert!(
        ExperimentSpec::from_toml("name = \"x\"\n[grid]\ndatasets=[]\nbackbones=[]\nstrategies=[]\nbogus = 1").is_err()
    );
}

#[test]
fn training_executor_runs_a_small_grid_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = toy_spec(dir.path(), &["a", "b"], &["random_init", "in_domain"], 1);
    spec.grid.datasets = vec!["b".into()];
    spec.grid.upstreams = vec!["a".into()];
    spec.save_checkpoints = true;
    let opts = RunOptions::default();
    let mut exec = TrainingExecutor::new(&spec, &opts);
    let summary = run_grid(&spec, &opts, &mut exec).unwrap();
    assert!(summary.failed.is_empty(), "{:?}", summary.failed);
    assert_eq!(summary.executed.len(), 2);
    let run = dir.path().join("runs/b_cbr_tiny_in_domain_a_full/seed-0");
    let lineage: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("lineage.json")).unwrap()).unwrap();
    assert_eq!(lineage["weight_origin_chain"], serde_json::json!(["random", "a", "b"]));
    assert!(run.join("history.jsonl").is_file());
    assert!(run.join("checkpoint/model.json").is_file());
    assert!(dir.path().join("splits/a.json").is_file() && dir.path().join("splits/b.json").is_file());
    assert!(dir.path().join("upstream").read_dir().unwrap().count() == 1);
    let out = report(dir.path(), &dir.path().join("report"), &[]).unwrap();
    assert!(out
        .files
        .iter()
        .any(|f| f.to_string_lossy().contains("curves_b_cbr_tiny_full")));
}
