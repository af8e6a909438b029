use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("split integrity error: {0}")]
    SplitIntegrity(String),

    #[error("dataset `{0}` ships predefined splits; use load_predefined_splits instead of make_splits")]
    PredefinedSplits(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),

    #[error("cannot resolve {what}: {hint}")]
    Resolution { what: String, hint: String },

    #[error("state error: {0}")]
    State(String),

    #[error("upstream dataset `{0}` is also the target; upstream and downstream data must be mutually exclusive")]
    MutualExclusion(String),

    #[error("freeze plan error: {0}")]
    Plan(String),

    #[error("lineage error: {0}")]
    Lineage(String),

    #[error("training diverged at epoch {epoch}, step {step} (loss = {loss})")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        last_good_epoch: Option<usize>,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("experiment spec error: {0}")]
    Spec(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parameter archive {path}: {message}")]
    Archive { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
