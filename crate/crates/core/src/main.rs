use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scaledistill::config::ExperimentConfig;
use scaledistill::harness::{self, Dataset, TrainMode, TrainOptions};
use scaledistill::{Error, Result};

/// Scale-distilled diffusion super-resolution on procedural textures.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Experiment config (JSON). Omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config field, e.g. `--set train.steps_per_stage=500`. Repeatable; wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the train/eval texture corpus and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train denoisers: direct, scale-distill or arch-distill.
    Train {
        #[arg(long)]
        mode: TrainMode,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reuse this autoencoder instead of training one into OUT.
        #[arg(long)]
        ae: Option<PathBuf>,
        /// Full-width teacher at the first scale (arch-distill).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Fine-tune the decoder on one-step samples of a frozen U-Net.
    FinetuneDecoder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        unet: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a U-Net + autoencoder pipeline at several step counts (CSV).
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// `UNET.ysrc,AE.ysrc`
        #[arg(long, value_delimiter = ',', required = true)]
        pipeline: Vec<PathBuf>,
        /// Defaults to the config's eval.step_counts.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Direct vs scale-distilled x original vs fine-tuned decoder at one step.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("YONOS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::InvalidArgument(format!("YONOS_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Numerical(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let data = |dir: &Path| Dataset::load(dir, &cfg);
    match cli.cmd {
        Cmd::GenData { out } => {
            let m = harness::gen_data(&cfg, &out)?;
            eprintln!("wrote {} train + {} eval images to {}", m.train.len(), m.eval.len(), out.display());
        }
        Cmd::Train {
            mode,
            data: dir,
            out,
            ae,
            teacher,
        } => {
            let opts = TrainOptions {
                ae: ae.as_deref(),
                teacher: teacher.as_deref(),
            };
            for p in harness::run_train(&cfg, &data(&dir)?, &out, mode, opts)? {
                eprintln!("{}", p.display());
            }
        }
        Cmd::FinetuneDecoder {
            data: dir,
            unet,
            ae,
            out,
        } => {
            let p = harness::run_finetune(&cfg, &data(&dir)?, &unet, &ae, &out)?;
            eprintln!("{}", p.display());
        }
        Cmd::Eval {
            data: dir,
            pipeline,
            steps,
            out,
        } => {
            let [unet, ae] = pipeline.as_slice() else {
                return Err(Error::InvalidArgument("--pipeline takes UNET.ysrc,AE.ysrc".into()));
            };
            let steps = if steps.is_empty() { cfg.eval.step_counts.clone() } else { steps };
            let rows = harness::run_eval(&cfg, &data(&dir)?, unet, ae, &steps, &out)?;
            print!("{}", harness::rows_to_csv(&rows));
        }
        Cmd::Ablate { data: dir, out } => {
            let run = harness::run_ablate(&cfg, &data(&dir)?, &out)?;
            print!("{}", harness::ablation_markdown(&run.cells));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            // Display already chains the context and the underlying cause.
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(2),
    }
}
