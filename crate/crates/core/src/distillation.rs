//! Training loops: first-scale training on raw data, progressive scale
//! distillation, and width (architecture) distillation.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::degradation::{degrade, resize_like, DegradeMode, Image, ScaleFactor};
use crate::diffusion::{distill_loss_on_tape, noisy_batch, sr_loss_on_tape, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamState};
use crate::tensor::Tensor;
use crate::unet::{DenoiserNet, NetworkConfig};

/// Seed for stage `index` of a run seeded with `seed`. Stage 0 uses `seed`
/// itself, so a one-scale schedule is the same run as plain training.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    if index == 0 {
        return seed;
    }
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub sched: NoiseSchedule,
}

impl TrainConfig {
    pub fn new(steps: usize, batch: usize, lr: f64, seed: u64) -> Self {
        Self {
            steps,
            batch,
            lr,
            seed,
            sched: NoiseSchedule::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "training needs batch >= 1 and a positive learning rate (got {} / {})",
                self.batch, self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSchedule {
    pub scales: Vec<ScaleFactor>,
    pub steps_per_stage: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl ScaleSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::InvalidArgument("scale schedule is empty".into()));
        }
        for w in self.scales.windows(2) {
            let (a, b) = (w[0].get(), w[1].get());
            if b <= a || b % a != 0 {
                return Err(Error::InvalidArgument(format!(
                    "scales must increase and divide each other; got {a} then {b}"
                )));
            }
        }
        Ok(())
    }

    pub fn stage_config(&self, index: usize) -> TrainConfig {
        TrainConfig::new(self.steps_per_stage, self.batch, self.lr, derive_seed(self.seed, index as u64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RawData,
    ScaleDistilled,
    ArchDistilled,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::RawData => "raw_data",
            Provenance::ScaleDistilled => "scale_distilled",
            Provenance::ArchDistilled => "arch_distilled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw_data" => Ok(Provenance::RawData),
            "scale_distilled" => Ok(Provenance::ScaleDistilled),
            "arch_distilled" => Ok(Provenance::ArchDistilled),
            other => Err(Error::InvalidArgument(format!("unknown provenance {other:?}"))),
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub stage: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedStage {
    pub scale: ScaleFactor,
    pub net: DenoiserNet,
    pub provenance: Provenance,
    pub metrics_log: Vec<LogRecord>,
}

/// High-resolution images plus the frozen autoencoder that maps them (and
/// their degraded versions) to latents.
///
/// With the deterministic bicubic degradation every latent is a pure
/// function of the image, so latents are computed once and cached.
pub struct LatentData<'a> {
    ae: &'a Autoencoder,
    images: &'a [Image],
    mode: DegradeMode,
    z_h: Vec<Tensor>,
    cached_lr: Mutex<BTreeMap<u32, Arc<Vec<Tensor>>>>,
}

const ENCODE_CHUNK: usize = 32;

impl<'a> LatentData<'a> {
    pub fn new(ae: &'a Autoencoder, images: &'a [Image], mode: DegradeMode) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if !ae.is_frozen() {
            return Err(Error::Frozen("diffusion training needs a frozen autoencoder".into()));
        }
        let mut z_h = Vec::with_capacity(images.len());
        for chunk in images.chunks(ENCODE_CHUNK) {
            z_h.extend(ae.encode_batch(&chunk.iter().collect::<Vec<_>>())?.unstack());
        }
        Ok(Self {
            ae,
            images,
            mode,
            z_h,
            cached_lr: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn latent_shape(&self) -> &[usize] {
        self.z_h[0].shape()
    }

    fn encode_degraded(&self, idx: &[usize], s: ScaleFactor, seeds: &[u64]) -> Result<Vec<Tensor>> {
        let mut up = Vec::with_capacity(idx.len());
        for (&i, &seed) in idx.iter().zip(seeds) {
            let x_h = &self.images[i];
            up.push(resize_like(&degrade(x_h, s, &self.mode, seed)?, x_h)?);
        }
        let mut out = Vec::with_capacity(idx.len());
        for chunk in up.chunks(ENCODE_CHUNK) {
            out.extend(self.ae.encode_batch(&chunk.iter().collect::<Vec<_>>())?.unstack());
        }
        Ok(out)
    }

    fn cached(&self, s: ScaleFactor) -> Result<Arc<Vec<Tensor>>> {
        let mut cache = self.cached_lr.lock().expect("latent cache poisoned");
        if let Some(v) = cache.get(&s.get()) {
            return Ok(v.clone());
        }
        let all: Vec<usize> = (0..self.images.len()).collect();
        let v = Arc::new(self.encode_degraded(&all, s, &vec![0; all.len()])?);
        cache.insert(s.get(), v.clone());
        Ok(v)
    }

    pub fn hr_batch(&self, idx: &[usize]) -> Result<Tensor> {
        Tensor::stack(&idx.iter().map(|&i| self.z_h[i].clone()).collect::<Vec<_>>())
    }

    /// Conditioning latents `E(resize_like(degrade(x_h, s)))` for the batch.
    pub fn lr_batch(&self, idx: &[usize], s: ScaleFactor, seeds: &[u64]) -> Result<Tensor> {
        if self.mode.is_stochastic() {
            Tensor::stack(&self.encode_degraded(idx, s, seeds)?)
        } else {
            let cache = self.cached(s)?;
            Tensor::stack(&idx.iter().map(|&i| cache[i].clone()).collect::<Vec<_>>())
        }
    }
}

/// Random draws for one optimizer step. Drawn in a fixed order so runs that
/// share a seed see identical images, times, noise and degradation seeds.
struct StepDraw {
    idx: Vec<usize>,
    t: Vec<f64>,
    eps: Tensor,
    seeds: Vec<u64>,
    seeds_prime: Vec<u64>,
}

fn draw_step(rng: &mut ChaCha8Rng, n_images: usize, batch: usize, latent: &[usize], sched: &NoiseSchedule) -> StepDraw {
    let (lo, hi) = sched.train_time_range();
    let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n_images)).collect();
    let t: Vec<f64> = (0..batch).map(|_| rng.gen_range(lo..=hi)).collect();
    let mut shape = vec![batch];
    shape.extend_from_slice(latent);
    let eps = Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        v as f32
    });
    let seeds = (0..batch).map(|_| rng.gen()).collect();
    let seeds_prime = (0..batch).map(|_| rng.gen()).collect();
    StepDraw {
        idx,
        t,
        eps,
        seeds,
        seeds_prime,
    }
}

fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// What a distillation step fed to each network, exposed to test hooks.
pub struct DistillStepView<'s> {
    pub step: usize,
    pub z_t: &'s Tensor,
    pub t: &'s [f64],
    pub student_cond: &'s Tensor,
    pub teacher_cond: &'s Tensor,
}

type Hook<'h> = Option<&'h mut dyn FnMut(&DistillStepView<'_>)>;

fn run_loop(
    net: &mut DenoiserNet,
    cfg: &TrainConfig,
    stage: usize,
    what: &str,
    mut step_fn: impl FnMut(usize, &DenoiserNet, &mut ChaCha8Rng) -> Result<(f32, crate::nn::GradMap)>,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    let mut rng = data_rng(cfg.seed);
    let mut opt = AdamState::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    for step in 0..cfg.steps {
        let (loss, grads) = step_fn(step, net, &mut rng).map_err(|e| e.context(format!("{what}, step {step}")))?;
        adam_step(&mut net.params, &grads, &mut opt)?;
        log.push(LogRecord {
            step,
            loss: loss as f64,
            stage,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    net.freeze();
    Ok(log)
}

/// Plain SR training on raw data at one scale, from a seeded initialization.
pub fn train_first_scale(
    data: &LatentData<'_>,
    net_config: &NetworkConfig,
    scale: ScaleFactor,
    cfg: &TrainConfig,
) -> Result<TrainedStage> {
    train_raw(data, DenoiserNet::build(net_config, cfg.seed)?, scale, cfg, 0)
}

fn train_raw(
    data: &LatentData<'_>,
    mut net: DenoiserNet,
    scale: ScaleFactor,
    cfg: &TrainConfig,
    stage: usize,
) -> Result<TrainedStage> {
    let latent = data.latent_shape().to_vec();
    let log = run_loop(&mut net, cfg, stage, &format!("x{} training", scale.get()), |_, net, rng| {
        let d = draw_step(rng, data.len(), cfg.batch, &latent, &cfg.sched);
        let z_h = data.hr_batch(&d.idx)?;
        let z_l = data.lr_batch(&d.idx, scale, &d.seeds)?;
        net.loss_and_grads(|tape, bound| sr_loss_on_tape(net, tape, bound, &z_h, &z_l, &d.t, &d.eps, &cfg.sched))
    })?;
    Ok(TrainedStage {
        scale,
        net,
        provenance: Provenance::RawData,
        metrics_log: log,
    })
}

fn check_teacher(teacher: &TrainedStage) -> Result<()> {
    if !teacher.net.frozen {
        return Err(Error::Frozen("teacher network must be frozen".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn distill(
    data: &LatentData<'_>,
    teacher: &DenoiserNet,
    mut student: DenoiserNet,
    scale: ScaleFactor,
    teacher_scale: ScaleFactor,
    cfg: &TrainConfig,
    stage: usize,
    provenance: Provenance,
    mut hook: Hook<'_>,
) -> Result<TrainedStage> {
    let latent = data.latent_shape().to_vec();
    let what = format!("x{} {} training", scale.get(), provenance.as_str());
    let log = run_loop(&mut student, cfg, stage, &what, |step, net, rng| {
        let d = draw_step(rng, data.len(), cfg.batch, &latent, &cfg.sched);
        let z_h = data.hr_batch(&d.idx)?;
        let (z_t, _) = noisy_batch(&z_h, &d.eps, &d.t, &cfg.sched)?;
        let z_l = data.lr_batch(&d.idx, scale, &d.seeds)?;
        let z_lp = if teacher_scale == scale {
            z_l.clone()
        } else {
            data.lr_batch(&d.idx, teacher_scale, &d.seeds_prime)?
        };
        if let Some(h) = hook.as_mut() {
            h(&DistillStepView {
                step,
                z_t: &z_t,
                t: &d.t,
                student_cond: &z_l,
                teacher_cond: &z_lp,
            });
        }
        net.loss_and_grads(|tape, bound| distill_loss_on_tape(net, teacher, tape, bound, &z_t, &z_l, &z_lp, &d.t))
    })?;
    Ok(TrainedStage {
        scale,
        net: student,
        provenance,
        metrics_log: log,
    })
}

/// One scale-distillation stage: the student starts from the teacher's
/// weights and regresses the teacher's prediction, where the teacher is
/// conditioned on the milder degradation `prev_scale`.
pub fn train_scale_student(
    teacher: &TrainedStage,
    data: &LatentData<'_>,
    scale: ScaleFactor,
    prev_scale: ScaleFactor,
    cfg: &TrainConfig,
) -> Result<TrainedStage> {
    train_scale_student_observed(teacher, data, scale, prev_scale, cfg, 0, None)
}

/// [`train_scale_student`] with a stage index for the log and an optional
/// hook that sees each step's network inputs.
pub fn train_scale_student_observed(
    teacher: &TrainedStage,
    data: &LatentData<'_>,
    scale: ScaleFactor,
    prev_scale: ScaleFactor,
    cfg: &TrainConfig,
    stage: usize,
    hook: Hook<'_>,
) -> Result<TrainedStage> {
    check_teacher(teacher)?;
    if scale <= prev_scale {
        return Err(Error::InvalidArgument(format!(
            "student scale x{} must exceed teacher scale x{}",
            scale.get(),
            prev_scale.get()
        )));
    }
    if teacher.scale != prev_scale {
        return Err(Error::InvalidArgument(format!(
            "teacher was trained at x{}, not x{}",
            teacher.scale.get(),
            prev_scale.get()
        )));
    }
    let student = teacher.net.unfrozen_copy();
    distill(data, &teacher.net, student, scale, prev_scale, cfg, stage, Provenance::ScaleDistilled, hook)
}

/// Runs a full schedule. `completed` holds stages restored from checkpoints;
/// training resumes after them. `on_stage` runs after each newly trained
/// stage (e.g. to write its checkpoint).
pub fn run_scale_schedule_resumable(
    data: &LatentData<'_>,
    net_config: &NetworkConfig,
    sched: &ScaleSchedule,
    completed: Vec<TrainedStage>,
    on_stage: &mut dyn FnMut(usize, &TrainedStage) -> Result<()>,
) -> Result<Vec<TrainedStage>> {
    sched.validate()?;
    if completed.len() > sched.scales.len() {
        return Err(Error::InvalidArgument("more completed stages than scales".into()));
    }
    for (i, st) in completed.iter().enumerate() {
        if st.scale != sched.scales[i] || !st.net.frozen {
            return Err(Error::InvalidArgument(format!("restored stage {i} does not match the schedule")));
        }
    }
    let mut stages = completed;
    for i in stages.len()..sched.scales.len() {
        let cfg = sched.stage_config(i);
        let scale = sched.scales[i];
        let stage = if i == 0 {
            train_raw(data, DenoiserNet::build(net_config, cfg.seed)?, scale, &cfg, 0)
        } else {
            train_scale_student_observed(&stages[i - 1], data, scale, sched.scales[i - 1], &cfg, i, None)
        }
        .map_err(|e| e.context(format!("stage {i} (x{})", scale.get())))?;
        on_stage(i, &stage)?;
        stages.push(stage);
    }
    Ok(stages)
}

pub fn run_scale_schedule(
    data: &LatentData<'_>,
    net_config: &NetworkConfig,
    sched: &ScaleSchedule,
) -> Result<Vec<TrainedStage>> {
    run_scale_schedule_resumable(data, net_config, sched, Vec::new(), &mut |_, _| Ok(()))
}

/// Trains a narrower network from scratch against a frozen full-width
/// teacher at the teacher's own scale; both see identical inputs.
pub fn train_arch_student(
    big_teacher: &TrainedStage,
    small_config: &NetworkConfig,
    data: &LatentData<'_>,
    scale: ScaleFactor,
    cfg: &TrainConfig,
) -> Result<TrainedStage> {
    check_teacher(big_teacher)?;
    if big_teacher.scale != scale {
        return Err(Error::InvalidArgument(format!(
            "architecture distillation runs at the teacher's scale x{}, not x{}",
            big_teacher.scale.get(),
            scale.get()
        )));
    }
    if small_config.width() >= big_teacher.net.config.width() || small_config.width_scale >= 1.0 {
        return Err(Error::InvalidConfig(format!(
            "student width {} (scale {}) is not smaller than teacher width {}",
            small_config.width(),
            small_config.width_scale,
            big_teacher.net.config.width()
        )));
    }
    let student = DenoiserNet::build(small_config, cfg.seed)?;
    distill(data, &big_teacher.net, student, scale, scale, cfg, 0, Provenance::ArchDistilled, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::gen_texture;

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            base_channels: 4,
            channel_mult: vec![1],
            depth: 1,
            time_embed_dim: 4,
            in_channels: 2,
            out_channels: 1,
            ..Default::default()
        }
    }

    fn images() -> Vec<Image> {
        (0..6).map(|s| gen_texture(s, 8, 8)).collect()
    }

    #[test]
    fn stage_seeds() {
        assert_eq!(derive_seed(42, 0), 42);
        assert_ne!(derive_seed(42, 1), derive_seed(42, 2));
    }

    #[test]
    fn schedule_validation() {
        let s = |v: &[u32]| ScaleSchedule {
            scales: v.iter().map(|&x| ScaleFactor::new(x).unwrap()).collect(),
            steps_per_stage: 1,
            batch: 1,
            lr: 1e-3,
            seed: 0,
        };
        assert!(s(&[2, 4, 8]).validate().is_ok());
        assert!(s(&[4, 2]).validate().is_err());
        assert!(s(&[2, 2]).validate().is_err());
        assert!(s(&[]).validate().is_err());
    }

    #[test]
    fn schedule_produces_frozen_stages_with_provenance() {
        let ae = Autoencoder::identity(1);
        let imgs = images();
        let data = LatentData::new(&ae, &imgs, DegradeMode::Bicubic).unwrap();
        let sched = ScaleSchedule {
            scales: vec![ScaleFactor::new(2).unwrap(), ScaleFactor::new(4).unwrap()],
            steps_per_stage: 3,
            batch: 2,
            lr: 1e-3,
            seed: 5,
        };
        let stages = run_scale_schedule(&data, &tiny_net(), &sched).unwrap();
        assert_eq!(stages.len(), 2);
        assert_eq!(stages[0].provenance, Provenance::RawData);
        assert_eq!(stages[1].provenance, Provenance::ScaleDistilled);
        assert!(stages.iter().all(|s| s.net.frozen && s.metrics_log.len() == 3));
        assert_eq!(stages[1].metrics_log[0].stage, 1);
    }

    #[test]
    fn unfrozen_teacher_and_bad_scales_are_rejected() {
        let ae = Autoencoder::identity(1);
        let imgs = images();
        let data = LatentData::new(&ae, &imgs, DegradeMode::Bicubic).unwrap();
        let two = ScaleFactor::new(2).unwrap();
        let four = ScaleFactor::new(4).unwrap();
        let cfg = TrainConfig::new(1, 1, 1e-3, 0);
        let mut teacher = train_first_scale(&data, &tiny_net(), two, &cfg).unwrap();
        assert!(train_scale_student(&teacher, &data, two, two, &cfg).is_err());
        assert!(train_scale_student(&teacher, &data, four, four, &cfg).is_err());
        teacher.net.frozen = false;
        assert!(matches!(
            train_scale_student(&teacher, &data, four, two, &cfg),
            Err(Error::Frozen(_))
        ));
    }
}
