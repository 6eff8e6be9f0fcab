//! Experiment commands behind the CLI: data generation, training, decoder
//! fine-tuning, evaluation and the direct/distilled × decoder ablation.
//! Every command is a plain function so examples and tests can call it.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{finetune_decoder, train_autoencoder, AEMode, Autoencoder, FinetuneTask};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::ExperimentConfig;
use crate::degradation::{
    bicubic_resize, degrade, gen_texture, quantize_u8, read_image, write_image, Image, ImageFormat, ScaleFactor,
};
use crate::distillation::{
    derive_seed, run_scale_schedule_resumable, train_arch_student, train_first_scale, train_scale_student_observed,
    LatentData, LogRecord, Provenance, TrainConfig, TrainedStage,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_sets, MetricReport};
use crate::sampler::{super_resolve_with, SamplerConfig, VPredictor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const AE_FILE: &str = "ae.ysrc";
pub const FINETUNED_AE_FILE: &str = "ae_finetuned.ysrc";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.json";

const TRAIN_SALT: u64 = 0x7472_6169_6e00;
const EVAL_SALT: u64 = 0x6576_616c_0000;
const DEGRADE_SALT: u64 = 0x6465_6772_6164;
const SAMPLE_SALT: u64 = 0x6e6f_6973_6500;

pub fn stage_file(index: usize, scale: ScaleFactor) -> String {
    format!("stage{index}_x{}.ysrc", scale.get())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- data

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub hr_size: usize,
    pub format: ImageFormat,
    pub train: Vec<ManifestEntry>,
    pub eval: Vec<ManifestEntry>,
}

/// Texture seeds for the train and eval splits.
pub fn texture_seeds(cfg: &ExperimentConfig) -> (Vec<u64>, Vec<u64>) {
    let d = &cfg.data;
    let train = (0..d.n_train).map(|i| derive_seed(d.seed ^ TRAIN_SALT, i as u64 + 1)).collect();
    let eval = (0..d.n_eval).map(|i| derive_seed(d.seed ^ EVAL_SALT, i as u64 + 1)).collect();
    (train, eval)
}

/// HR train and eval images, 8-bit quantized exactly as they are on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Image>,
    pub eval: Vec<Image>,
}

fn render(seeds: &[u64], size: usize) -> Vec<Image> {
    seeds.par_iter().map(|&s| quantize_u8(&gen_texture(s, size, size))).collect()
}

impl Dataset {
    /// The dataset `gen_data` would write, without touching the disk.
    pub fn generate(cfg: &ExperimentConfig) -> Self {
        let (train, eval) = texture_seeds(cfg);
        Self {
            train: render(&train, cfg.data.hr_size),
            eval: render(&eval, cfg.data.hr_size),
        }
    }

    pub fn load(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", mpath.display())))?;
        if m.hr_size != cfg.data.hr_size || m.train.len() != cfg.data.n_train || m.eval.len() != cfg.data.n_eval {
            return Err(Error::Config(format!(
                "{} holds {}+{} images of {}px; config wants {}+{} of {}px",
                mpath.display(),
                m.train.len(),
                m.eval.len(),
                m.hr_size,
                cfg.data.n_train,
                cfg.data.n_eval,
                cfg.data.hr_size
            )));
        }
        let read = |entries: &[ManifestEntry]| -> Result<Vec<Image>> {
            entries.par_iter().map(|e| read_image(&dir.join(&e.file))).collect()
        };
        Ok(Self {
            train: read(&m.train)?,
            eval: read(&m.eval)?,
        })
    }
}

/// Writes the texture corpus and its manifest into `out`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let (train_seeds, eval_seeds) = texture_seeds(cfg);
    let ext = cfg.data.format.extension();
    let mut manifest = Manifest {
        hr_size: cfg.data.hr_size,
        format: cfg.data.format,
        train: Vec::new(),
        eval: Vec::new(),
    };
    for (split, seeds) in [("train", &train_seeds), ("eval", &eval_seeds)] {
        create_dir(&out.join(split))?;
        let entries: Vec<ManifestEntry> = seeds
            .par_iter()
            .enumerate()
            .map(|(i, &seed)| {
                let file = format!("{split}/{i:05}.{ext}");
                write_image(&out.join(&file), &gen_texture(seed, cfg.data.hr_size, cfg.data.hr_size))?;
                Ok(ManifestEntry { file, seed })
            })
            .collect::<Result<_>>()?;
        if split == "train" {
            manifest.train = entries;
        } else {
            manifest.eval = entries;
        }
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&out.join(MANIFEST_FILE), &text)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json_pretty())?;
    Ok(manifest)
}

// ---------------------------------------------------------------- logs

pub fn append_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("log record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- checkpoints

fn stage_checkpoint(stage: &TrainedStage, index: usize, cfg: &TrainConfig) -> Checkpoint {
    Checkpoint::from_net(
        &stage.net,
        &[
            ("scale", stage.scale.get().to_string()),
            ("provenance", stage.provenance.as_str().to_string()),
            ("stage", index.to_string()),
            ("steps", cfg.steps.to_string()),
            ("batch", cfg.batch.to_string()),
            ("lr", cfg.lr.to_string()),
            ("data_seed", cfg.seed.to_string()),
        ],
    )
}

pub fn save_stage(path: &Path, stage: &TrainedStage, index: usize, cfg: &TrainConfig) -> Result<()> {
    save_checkpoint(path, &stage_checkpoint(stage, index, cfg))
}

/// Restores a trained stage (without its loss log) from a checkpoint.
pub fn load_stage(path: &Path) -> Result<TrainedStage> {
    let c = load_checkpoint(path)?;
    let wrap = |e: Error| e.context(path.display().to_string());
    let scale: u32 = c.meta("scale").map_err(wrap)?.parse().map_err(|_| Error::Checkpoint {
        path: path.into(),
        msg: "scale metadata is not an integer".into(),
    })?;
    Ok(TrainedStage {
        scale: ScaleFactor::new(scale)?,
        net: c.to_net().map_err(wrap)?,
        provenance: Provenance::parse(c.meta("provenance").map_err(wrap)?)?,
        metrics_log: Vec::new(),
    })
}

pub fn load_autoencoder(path: &Path) -> Result<Autoencoder> {
    load_checkpoint(path)?
        .to_autoencoder()
        .map_err(|e| e.context(path.display().to_string()))
}

/// Loads `out/ae.ysrc` if present, otherwise trains the autoencoder on the
/// training split and writes it there.
pub fn prepare_autoencoder(cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<Autoencoder> {
    if cfg.ae.mode == AEMode::Identity {
        return Ok(Autoencoder::identity(1));
    }
    let path = out.join(AE_FILE);
    if path.exists() {
        let ae = load_autoencoder(&path)?;
        if ae.config != cfg.autoencoder_config() {
            return Err(Error::Config(format!("{} does not match the configured autoencoder", path.display())));
        }
        return Ok(ae);
    }
    let (ae, log) = train_autoencoder(&data.train, &cfg.autoencoder_config(), &cfg.ae_train_config())
        .map_err(|e| e.context("autoencoder training"))?;
    let records: Vec<LogRecord> = log
        .losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| LogRecord {
            step,
            loss,
            stage: 0,
            wall_ms: 0,
        })
        .collect();
    append_log(&out.join("ae_log.jsonl"), &records)?;
    save_checkpoint(&path, &Checkpoint::from_autoencoder(&ae))?;
    Ok(ae)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Each scale trained independently on raw data.
    Direct,
    /// First scale on raw data, later scales distilled from the previous one.
    ScaleDistill,
    /// A narrow student distilled from a full-width teacher at the first
    /// scale, then scale-distilled through the remaining scales.
    ArchDistill,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(TrainMode::Direct),
            "scale-distill" => Ok(TrainMode::ScaleDistill),
            "arch-distill" => Ok(TrainMode::ArchDistill),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (direct | scale-distill | arch-distill)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Use this autoencoder instead of `out/ae.ysrc`.
    pub ae: Option<&'a Path>,
    /// Full-width teacher checkpoint (arch-distill only).
    pub teacher: Option<&'a Path>,
}

/// Trains per `mode`, writing `stage{i}_x{s}.ysrc` and `train_log.jsonl`
/// into `out`. Stages whose checkpoint already exists are loaded instead
/// of retrained, so an interrupted run resumes where it stopped.
pub fn run_train(cfg: &ExperimentConfig, data: &Dataset, out: &Path, mode: TrainMode, opts: TrainOptions<'_>) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json_pretty())?;
    let ae = match opts.ae {
        Some(p) => load_autoencoder(p)?,
        None => prepare_autoencoder(cfg, data, out)?,
    };
    let latents = LatentData::new(&ae, &data.train, cfg.data.degrade_mode)?;
    let sched = cfg.schedule()?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let paths: Vec<PathBuf> = sched
        .scales
        .iter()
        .enumerate()
        .map(|(i, &s)| out.join(stage_file(i, s)))
        .collect();
    let restored = || -> Result<Vec<TrainedStage>> {
        paths.iter().take_while(|p| p.exists()).map(|p| load_stage(p)).collect()
    };

    match mode {
        TrainMode::Direct => {
            for (i, &scale) in sched.scales.iter().enumerate() {
                if paths[i].exists() {
                    continue;
                }
                let tc = sched.stage_config(i);
                let mut stage = train_first_scale(&latents, &cfg.model, scale, &tc)
                    .map_err(|e| e.context(format!("direct x{}", scale.get())))?;
                stage.metrics_log.iter_mut().for_each(|r| r.stage = i);
                append_log(&log_path, &stage.metrics_log)?;
                save_stage(&paths[i], &stage, i, &tc)?;
            }
        }
        TrainMode::ScaleDistill => {
            run_scale_schedule_resumable(&latents, &cfg.model, &sched, restored()?, &mut |i, stage| {
                append_log(&log_path, &stage.metrics_log)?;
                save_stage(&paths[i], stage, i, &sched.stage_config(i))
            })?;
        }
        TrainMode::ArchDistill => {
            let tpath = opts
                .teacher
                .ok_or_else(|| Error::InvalidArgument("arch-distill needs --teacher CKPT".into()))?;
            let teacher = load_stage(tpath)?;
            if teacher.scale != sched.scales[0] {
                return Err(Error::InvalidArgument(format!(
                    "teacher is x{}, schedule starts at x{}",
                    teacher.scale.get(),
                    sched.scales[0].get()
                )));
            }
            let mut stages = restored()?;
            for i in stages.len()..sched.scales.len() {
                let tc = sched.stage_config(i);
                let scale = sched.scales[i];
                let stage = if i == 0 {
                    train_arch_student(&teacher, &cfg.small_model_config(), &latents, scale, &tc)
                } else {
                    train_scale_student_observed(&stages[i - 1], &latents, scale, sched.scales[i - 1], &tc, i, None)
                }
                .map_err(|e| e.context(format!("stage {i} (x{})", scale.get())))?;
                append_log(&log_path, &stage.metrics_log)?;
                save_stage(&paths[i], &stage, i, &tc)?;
                stages.push(stage);
            }
        }
    }
    Ok(paths)
}

// ---------------------------------------------------------------- fine-tune

/// Fine-tunes the decoder of `ae` on one-step samples of `unet` and writes
/// the resulting autoencoder to `out/ae_finetuned.ysrc`.
pub fn run_finetune(cfg: &ExperimentConfig, data: &Dataset, unet: &Path, ae: &Path, out: &Path) -> Result<PathBuf> {
    if cfg.finetune.sampler_steps != 1 {
        return Err(Error::Config(format!(
            "finetune.sampler_steps = {}; decoder fine-tuning is defined on one-step samples",
            cfg.finetune.sampler_steps
        )));
    }
    create_dir(out)?;
    let stage = load_stage(unet)?;
    if !stage.net.frozen {
        return Err(Error::Frozen(format!("{} is not marked frozen", unet.display())));
    }
    let ae = load_autoencoder(ae)?;
    let tuned = finetune_stage_decoder(cfg, data, &ae, &stage, &out.join("finetune_log.jsonl"))?;
    let path = out.join(FINETUNED_AE_FILE);
    save_checkpoint(&path, &Checkpoint::from_autoencoder(&tuned))?;
    Ok(path)
}

pub fn finetune_stage_decoder(
    cfg: &ExperimentConfig,
    data: &Dataset,
    ae: &Autoencoder,
    stage: &TrainedStage,
    log_path: &Path,
) -> Result<Autoencoder> {
    let sampler = SamplerConfig::new(cfg.finetune.sampler_steps, cfg.finetune.seed);
    let task = FinetuneTask {
        scale: stage.scale,
        degrade_mode: cfg.data.degrade_mode,
    };
    let (tuned, log) = finetune_decoder(ae, &stage.net, &sampler, &data.train, &task, &cfg.finetune_config())
        .map_err(|e| e.context("decoder fine-tuning"))?;
    let records: Vec<LogRecord> = log
        .losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| LogRecord {
            step,
            loss,
            stage: 0,
            wall_ms: 0,
        })
        .collect();
    append_log(log_path, &records)?;
    Ok(tuned)
}

// ---------------------------------------------------------------- eval

/// Mean metrics over the eval set at one DDIM step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub steps: usize,
    pub report: MetricReport,
}

/// LR inputs for the eval split at `scale`; each image has its own
/// degradation seed.
pub fn eval_inputs(cfg: &ExperimentConfig, eval_hr: &[Image], scale: ScaleFactor) -> Result<Vec<Image>> {
    eval_hr
        .par_iter()
        .enumerate()
        .map(|(i, x)| degrade(x, scale, &cfg.data.degrade_mode, derive_seed(cfg.eval.seed ^ DEGRADE_SALT, i as u64 + 1)))
        .collect()
}

fn sample_seeds(cfg: &ExperimentConfig, n: usize) -> Vec<u64> {
    (0..n).map(|i| derive_seed(cfg.eval.seed ^ SAMPLE_SALT, i as u64 + 1)).collect()
}

/// Super-resolves the eval split at each step count and scores it.
pub fn evaluate_predictor<P: VPredictor + ?Sized>(
    net: &P,
    ae: &Autoencoder,
    cfg: &ExperimentConfig,
    eval_hr: &[Image],
    scale: ScaleFactor,
    step_counts: &[usize],
) -> Result<Vec<EvalRow>> {
    let lr = eval_inputs(cfg, eval_hr, scale)?;
    let seeds = sample_seeds(cfg, lr.len());
    let mut rows = Vec::with_capacity(step_counts.len());
    for &k in step_counts {
        let mut outputs = Vec::with_capacity(lr.len());
        for (chunk, sc) in lr.chunks(cfg.eval.batch).zip(seeds.chunks(cfg.eval.batch)) {
            outputs.extend(super_resolve_with(net, ae, chunk, scale, sc, k)?);
        }
        rows.push(EvalRow {
            steps: k,
            report: evaluate_sets(&outputs, eval_hr).map_err(|e| e.context(format!("metrics at K={k}")))?,
        });
    }
    Ok(rows)
}

/// Metrics of plain bicubic upsampling of the eval inputs.
pub fn bicubic_baseline(cfg: &ExperimentConfig, eval_hr: &[Image], scale: ScaleFactor) -> Result<MetricReport> {
    let lr = eval_inputs(cfg, eval_hr, scale)?;
    let s = scale.usize();
    let up = lr
        .iter()
        .map(|x| bicubic_resize(x, x.height * s, x.width * s))
        .collect::<Result<Vec<_>>>()?;
    evaluate_sets(&up, eval_hr)
}

pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("steps,psnr,ssim,pfid\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.steps, r.report.psnr_db, r.report.ssim, r.report.pfid);
    }
    s
}

/// Gnuplot commands that plot pFID and PSNR against step count from `csv`.
pub fn gnuplot_script(csv: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set logscale x 2\n\
         set xlabel 'DDIM steps'\n\
         set terminal pngcairo size 900,400\n\
         set output '{csv}.png'\n\
         set multiplot layout 1,2\n\
         set ylabel 'pFID'\n\
         plot '{csv}' using 1:4 with linespoints\n\
         set ylabel 'PSNR (dB)'\n\
         plot '{csv}' using 1:2 with linespoints\n\
         unset multiplot\n"
    )
}

/// Evaluates `unet` + `ae` checkpoints and writes `out_csv` plus
/// `out_csv.gp`.
pub fn run_eval(
    cfg: &ExperimentConfig,
    data: &Dataset,
    unet: &Path,
    ae: &Path,
    step_counts: &[usize],
    out_csv: &Path,
) -> Result<Vec<EvalRow>> {
    cfg.check_eval_size()?;
    if step_counts.is_empty() || step_counts.contains(&0) {
        return Err(Error::InvalidArgument("step counts must be >= 1".into()));
    }
    let stage = load_stage(unet)?;
    if !stage.net.frozen {
        return Err(Error::Frozen(format!("{} is not marked frozen", unet.display())));
    }
    let ae = load_autoencoder(ae)?;
    let rows = evaluate_predictor(&stage.net, &ae, cfg, &data.eval, stage.scale, step_counts)?;
    if let Some(dir) = out_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_text(out_csv, &rows_to_csv(&rows))?;
    let name = out_csv.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut gp = out_csv.as_os_str().to_owned();
    gp.push(".gp");
    write_text(Path::new(&gp), &gnuplot_script(&name))?;
    Ok(rows)
}

// ---------------------------------------------------------------- ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub scale: u32,
    /// `direct` or `distilled`.
    pub model: String,
    /// `original` or `finetuned`.
    pub decoder: String,
    pub report: MetricReport,
}

/// What each cell's U-Net was trained with; identical across a scale's
/// cells by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRecord {
    pub scale: u32,
    pub model: String,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub data_seed: u64,
}

/// Everything `run_ablate` trained, for callers that keep evaluating.
pub struct AblationRun {
    pub ae: Autoencoder,
    pub distilled: Vec<TrainedStage>,
    /// Direct models for every scale after the first, keyed by schedule index.
    pub direct: Vec<(usize, TrainedStage)>,
    pub finetuned: Vec<(u32, String, Autoencoder)>,
    pub cells: Vec<AblationCell>,
    pub budgets: Vec<BudgetRecord>,
}

fn load_or_train(path: &Path, index: usize, tc: &TrainConfig, train: impl FnOnce() -> Result<TrainedStage>) -> Result<TrainedStage> {
    if path.exists() {
        return load_stage(path);
    }
    let stage = train()?;
    save_stage(path, &stage, index, tc)?;
    Ok(stage)
}

/// The 2×2 grid {direct, scale-distilled} × {original, fine-tuned decoder}
/// at one DDIM step, for every scale after the first in the schedule.
/// Writes `ablation.csv`, `ablation.md` and `budget.jsonl` into `out`.
pub fn run_ablate(cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<AblationRun> {
    cfg.check_eval_size()?;
    let sched = cfg.schedule()?;
    if sched.scales.len() < 2 {
        return Err(Error::Config("ablation needs at least two scales (a teacher and a target)".into()));
    }
    create_dir(out)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json_pretty())?;
    let ae = prepare_autoencoder(cfg, data, out)?;
    let latents = LatentData::new(&ae, &data.train, cfg.data.degrade_mode)?;

    let dist_dir = out.join("distill");
    create_dir(&dist_dir)?;
    let dist_paths: Vec<PathBuf> = sched
        .scales
        .iter()
        .enumerate()
        .map(|(i, &s)| dist_dir.join(stage_file(i, s)))
        .collect();
    let restored = dist_paths
        .iter()
        .take_while(|p| p.exists())
        .map(|p| load_stage(p))
        .collect::<Result<Vec<_>>>()?;
    let dist_log = dist_dir.join(TRAIN_LOG_FILE);
    let distilled = run_scale_schedule_resumable(&latents, &cfg.model, &sched, restored, &mut |i, stage| {
        append_log(&dist_log, &stage.metrics_log)?;
        save_stage(&dist_paths[i], stage, i, &sched.stage_config(i))
    })?;

    let direct_dir = out.join("direct");
    create_dir(&direct_dir)?;
    let mut direct = Vec::new();
    let mut budgets = Vec::new();
    for i in 1..sched.scales.len() {
        let scale = sched.scales[i];
        // Same steps, batch, lr and data seed as the distilled stage it is compared with.
        let tc = sched.stage_config(i);
        let stage = load_or_train(&direct_dir.join(format!("direct_x{}.ysrc", scale.get())), i, &tc, || {
            let st = train_first_scale(&latents, &cfg.model, scale, &tc)?;
            append_log(&direct_dir.join(TRAIN_LOG_FILE), &st.metrics_log)?;
            Ok(st)
        })?;
        for model in ["direct", "distilled"] {
            budgets.push(BudgetRecord {
                scale: scale.get(),
                model: model.into(),
                steps: tc.steps,
                batch: tc.batch,
                lr: tc.lr,
                data_seed: tc.seed,
            });
        }
        direct.push((i, stage));
    }

    let ft_dir = out.join("finetune");
    create_dir(&ft_dir)?;
    let mut cells = Vec::new();
    let mut finetuned = Vec::new();
    for (i, direct_stage) in &direct {
        let scale = sched.scales[*i];
        for (model, stage) in [("direct", direct_stage), ("distilled", &distilled[*i])] {
            let path = ft_dir.join(format!("{model}_x{}.ysrc", scale.get()));
            let tuned = if path.exists() {
                load_autoencoder(&path)?
            } else {
                let t = finetune_stage_decoder(cfg, data, &ae, stage, &ft_dir.join(format!("{model}_x{}.jsonl", scale.get())))?;
                save_checkpoint(&path, &Checkpoint::from_autoencoder(&t))?;
                t
            };
            for (decoder, dec_ae) in [("original", &ae), ("finetuned", &tuned)] {
                let row = evaluate_predictor(&stage.net, dec_ae, cfg, &data.eval, scale, &[1])?;
                cells.push(AblationCell {
                    scale: scale.get(),
                    model: model.into(),
                    decoder: decoder.into(),
                    report: row[0].report.clone(),
                });
            }
            finetuned.push((scale.get(), model.to_string(), tuned));
        }
    }

    let mut budget_text = String::new();
    for b in &budgets {
        budget_text.push_str(&serde_json::to_string(b).expect("budget serializes"));
        budget_text.push('\n');
    }
    write_text(&out.join("budget.jsonl"), &budget_text)?;
    write_text(&out.join("ablation.csv"), &ablation_csv(&cells))?;
    write_text(&out.join("ablation.md"), &ablation_markdown(&cells))?;
    Ok(AblationRun {
        ae,
        distilled,
        direct,
        finetuned,
        cells,
        budgets,
    })
}

pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut s = String::from("scale,model,decoder,pfid,psnr,ssim\n");
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6}",
            c.scale, c.model, c.decoder, c.report.pfid, c.report.psnr_db, c.report.ssim
        );
    }
    s
}

/// One row per (scale, model); original and fine-tuned decoder side by side.
pub fn ablation_markdown(cells: &[AblationCell]) -> String {
    let mut s = String::from(
        "| Scale | Model | pFID (orig.) | PSNR (orig.) | SSIM (orig.) | pFID (ft.) | PSNR (ft.) | SSIM (ft.) |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for pair in cells.chunks(2) {
        if let [o, f] = pair {
            let _ = writeln!(
                s,
                "| x{} | {} | {:.3} | {:.2} | {:.4} | {:.3} | {:.2} | {:.4} |",
                o.scale, o.model, o.report.pfid, o.report.psnr_db, o.report.ssim, f.report.pfid, f.report.psnr_db, f.report.ssim
            );
        }
    }
    s
}
