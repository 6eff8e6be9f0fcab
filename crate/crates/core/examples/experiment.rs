//! The full ablation in-process: autoencoder, scale-distilled and direct
//! denoisers at each scale, decoder fine-tuning, one-step evaluation.
//!
//! Extra arguments are config overrides, so a quick run looks like
//!
//!     cargo run --release --example experiment -- /tmp/exp train.steps_per_stage=300 ae.steps=300 finetune.steps=100
//!
//! Rerunning with the same directory resumes from the checkpoints in it.

use std::path::PathBuf;

use scaledistill::config::ExperimentConfig;
use scaledistill::harness::{ablation_markdown, run_ablate, Dataset};

fn main() -> scaledistill::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "experiment_out".into()));
    let overrides: Vec<String> = args.collect();
    let cfg = ExperimentConfig::from_json_with_overrides("", &overrides)?;
    let data = Dataset::generate(&cfg);
    let run = run_ablate(&cfg, &data, &out)?;
    print!("{}", ablation_markdown(&run.cells));
    for b in &run.budgets {
        println!("{b:?}");
    }
    println!("results in {}", out.display());
    Ok(())
}
