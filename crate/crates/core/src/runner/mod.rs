//! Experiment grids, resumable execution and reporting.

mod config;
mod exec;
mod grid;
pub mod plot;
mod report;
mod store;

pub use config::{DatasetSource, ExperimentSpec, GridAxes, ReferenceRow, ToyParams, Workspace};
pub use exec::{
    cell_dir_name, effective_spec, run_dir, run_grid, select_cells, sweep_lowdata, CellExecutor, RunOptions, RunOutput,
    RunSummary, TrainingExecutor, CONFIG_FILE, GRID_FILE,
};
pub use grid::{cell_key, expand_grid, CellJob, Exclusion, Grid};
pub use report::{
    bold_argmax, build_tables, fraction_label, report, summarize, CellSummary, ReportOutputs, Table, TableCell,
};
pub use store::{FailureRecord, ResultsStore, RunRecord, FAILURES_FILE, RESULTS_FILE};
