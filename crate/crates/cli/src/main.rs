use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use damage_transfer::data::{synth_toy_dataset, DataSplit, DatasetDescriptor};
use damage_transfer::explain::{export, grad_cam_image, overlay};
use damage_transfer::runner::{
    report, run_grid, sweep_lowdata, ExperimentSpec, RunOptions, RunSummary, TrainingExecutor, Workspace,
};
use damage_transfer::zoo::load_checkpoint;
use damage_transfer::{Error, Result};

/// Transfer-learning benchmark harness for structural damage classification.
#[derive(Parser, Debug)]
#[command(name = "damage-transfer", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides the experiment's `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Continue a results store, skipping completed runs.
    #[arg(long, global = true)]
    resume: bool,
    /// Base seed (runs use seed, seed+1, ...); for `splits`, the split seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Only these grid cells.
    #[arg(long, global = true, value_name = "KEY[,KEY]", value_delimiter = ',')]
    cells: Option<Vec<String>>,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Validate the experiment's datasets; write descriptors and materialize toys.
    RegisterData,
    /// Compute and save the train/val/test split of every dataset.
    Splits,
    /// Run the experiment grid.
    Run,
    /// Run the grid over the low-data fractions.
    SweepLowdata,
    /// Grad-CAM heatmap of one image.
    Gradcam(GradcamArgs),
    /// Tables and plots from a results store.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GradcamArgs {
    /// Checkpoint directory of a trained model.
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Input image.
    #[arg(long, value_name = "PATH")]
    image: PathBuf,
    /// Output index to explain.
    #[arg(long = "class", default_value_t = 0)]
    class_idx: usize,
    /// Feature-map layer; defaults to the family's last convolutional block.
    #[arg(long)]
    layer: Option<String>,
    /// Heatmap opacity in the overlay.
    #[arg(long, default_value_t = 0.4)]
    alpha: f32,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Results store directory; defaults to the experiment's output directory.
    #[arg(long, value_name = "DIR")]
    store: Option<PathBuf>,
}

fn load_spec(common: &Common) -> Result<ExperimentSpec> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Error::Argument("this command needs --config PATH".into()))?;
    let mut spec = ExperimentSpec::load(path)?;
    if let Some(out) = &common.out {
        spec.output_dir = out.clone();
    }
    Ok(spec)
}

fn write_json(path: &Path, value: &DatasetDescriptor) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Argument(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .map_err(|e| Error::Argument(format!("{}: {e}", path.display())))
}

fn register_data(common: &Common) -> Result<()> {
    let spec = load_spec(common)?;
    let root = spec.output_dir.join("datasets");
    for src in &spec.datasets {
        let data = src.load()?;
        let d = data.descriptor();
        println!(
            "{:<16} {:<10} {:>7} items  {} classes: {}",
            d.name,
            format!("{:?}", d.task_kind).to_lowercase(),
            d.item_count,
            d.num_classes(),
            d.class_names.join(", ")
        );
        write_json(&root.join(format!("{}.json", d.name)), d)?;
        if let Some(toy) = src.toy_spec() {
            let manifest = synth_toy_dataset(&toy)?.write_to(&root.join(&d.name))?;
            println!("{:<16} images and manifest written to {}", "", manifest.display());
        }
    }
    Ok(())
}

fn splits(common: &Common) -> Result<()> {
    let mut spec = load_spec(common)?;
    if let Some(s) = common.seed {
        spec.split_seed = s;
    }
    let names: Vec<String> = spec.datasets.iter().map(|d| d.name.clone()).collect();
    let ws = Workspace::load(&spec, &names, None)?;
    let dir = spec.output_dir.join("splits");
    std::fs::create_dir_all(&dir).map_err(|e| Error::Argument(format!("{}: {e}", dir.display())))?;
    for (name, split) in &ws.splits {
        let path = dir.join(format!("{name}.json"));
        if path.is_file() && !common.resume {
            let old = DataSplit::load(&path)?;
            if &old != split {
                return Err(Error::State(format!(
                    "{} holds a different split; delete it or pass --resume to keep it",
                    path.display()
                )));
            }
        }
        if !path.is_file() {
            split.save(&path)?;
        }
        println!(
            "{name:<16} train {:>6}  val {:>6}  test {:>6}  -> {}",
            split.train.len(),
            split.val.len(),
            split.test.len(),
            path.display()
        );
    }
    Ok(())
}

fn print_summary(s: &RunSummary) {
    println!(
        "config {}: {} runs executed, {} already complete, {} failed, {} cells excluded",
        &s.config_hash[..12],
        s.executed.len(),
        s.skipped.len(),
        s.failed.len(),
        s.excluded.len()
    );
    for (key, seed, err) in &s.failed {
        println!("FAILED {key} seed {seed}: {err}");
    }
}

fn run(common: &Common, low_data: bool) -> Result<()> {
    let spec = load_spec(common)?;
    let opts = RunOptions {
        resume: common.resume,
        cells: common.cells.clone(),
        seed: common.seed,
    };
    let mut exec = TrainingExecutor::new(&spec, &opts);
    let summary = if low_data {
        sweep_lowdata(&spec, &opts, &mut exec)?
    } else {
        run_grid(&spec, &opts, &mut exec)?
    };
    print_summary(&summary);
    Ok(())
}

fn gradcam(common: &Common, args: &GradcamArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let img = image::open(&args.image)?.to_rgb8();
    let layer = args.layer.clone().unwrap_or_else(|| model.last_conv_layer());
    let (heatmap, resized) = grad_cam_image(&model, &img, args.class_idx, &layer)?;
    let blended = overlay(&heatmap, &resized, args.alpha)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("gradcam"));
    let stem = args
        .image
        .file_stem()
        .map(|s| format!("{}_class{}", s.to_string_lossy(), args.class_idx))
        .unwrap_or_else(|| "gradcam".into());
    let files = export(&heatmap, &blended, &out, &stem, &args.checkpoint.display().to_string())?;
    if heatmap.all_zero {
        println!("warning: the class score has no positive evidence at `{layer}`; the heatmap is all zero");
    }
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn report_cmd(common: &Common, args: &ReportArgs) -> Result<()> {
    let spec = common.config.as_deref().map(ExperimentSpec::load).transpose()?;
    let store = args
        .store
        .clone()
        .or_else(|| spec.as_ref().map(|s| s.output_dir.clone()))
        .ok_or_else(|| Error::Argument("report needs --store DIR or --config PATH".into()))?;
    let out = common.out.clone().unwrap_or_else(|| store.join("report"));
    let refs = spec.map(|s| s.references).unwrap_or_default();
    let outputs = report(&store, &out, &refs)?;
    for t in &outputs.tables {
        println!("{}", t.to_text());
    }
    println!("{} files written to {}", outputs.files.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match &cli.verb {
        Verb::RegisterData => register_data(c),
        Verb::Splits => splits(c),
        Verb::Run => run(c, false),
        Verb::SweepLowdata => run(c, true),
        Verb::Gradcam(a) => gradcam(c, a),
        Verb::Report(a) => report_cmd(c, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
