//! Trains cbr_tiny from scratch on the binary crack toy and prints test AUC.
//!
//! `cargo run --example toy_crack -- [seeds] [epochs]`

use damage_transfer::data::{make_splits, register_toy, synth_toy_dataset, ToySpec, DEFAULT_RATIOS};
use damage_transfer::eval::{evaluate, AUC_ROC};
use damage_transfer::train::{train, TrainConfig};
use damage_transfer::transfer::FreezePlan;
use damage_transfer::zoo::{build_cbr, Family, TaskSpec};

fn main() -> damage_transfer::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(30);
    let toy = synth_toy_dataset(&ToySpec::binary(32, 32, 100, 1))?;
    let data = register_toy(&toy)?;
    let split = make_splits(&data, DEFAULT_RATIOS, 7, true)?;
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    for seed in 0..seeds {
        let start = std::time::Instant::now();
        let model = build_cbr(Family::CbrTiny, (32, 32), &TaskSpec::for_dataset(&data), seed)?;
        let plan = FreezePlan::all_trainable(&model);
        let (model, history) = train(model, &plan, &data, &split, &cfg, seed)?;
        let run = evaluate(&model, &data, &split.test, "random_init", seed)?;
        let first = &history.records[0];
        let last = history.records.last().unwrap();
        println!(
            "seed {seed}: auc {:.4}  loss {:.4} -> {:.4}  val {:.4} -> {:.4}  {:.1}s",
            run.metrics[AUC_ROC],
            first.train_loss,
            last.train_loss,
            first.val_loss,
            last.val_loss,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
