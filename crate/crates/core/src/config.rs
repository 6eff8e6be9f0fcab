//! Experiment configuration: one JSON document, every field defaulted,
//! unknown keys rejected. `--set a.b=value` overrides are applied to the JSON
//! tree before it is parsed, so they go through the same checks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autoencoder::{AEMode, AeTrainConfig, AutoencoderConfig, FinetuneConfig};
use crate::degradation::{DegradeMode, ImageFormat, ScaleFactor};
use crate::distillation::{ScaleSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::PFID_MIN_SET;
use crate::unet::NetworkConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub hr_size: usize,
    pub seed: u64,
    pub degrade_mode: DegradeMode,
    pub format: ImageFormat,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_eval: 128,
            hr_size: 32,
            seed: 0,
            degrade_mode: DegradeMode::Bicubic,
            format: ImageFormat::Png,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps_per_stage: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps_per_stage: 6000,
            batch: 16,
            lr: 2e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeSection {
    pub mode: AEMode,
    pub latent_channels: usize,
    pub f: usize,
    pub base_channels: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub crop: usize,
    pub seed: u64,
}

impl Default for AeSection {
    fn default() -> Self {
        let c = AutoencoderConfig::default();
        let t = AeTrainConfig::default();
        Self {
            mode: c.mode,
            latent_channels: c.latent_channels,
            f: c.f,
            base_channels: c.base_channels,
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            crop: t.crop,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// DDIM steps used to produce training latents; only 1 is accepted.
    pub sampler_steps: usize,
    pub seed: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        Self {
            steps: f.steps,
            batch: f.batch,
            lr: f.lr,
            sampler_steps: 1,
            seed: f.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub step_counts: Vec<usize>,
    pub seed: u64,
    pub batch: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            step_counts: vec![1, 2, 4, 8, 16],
            seed: 0,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmallModelSection {
    pub width_scale: f64,
}

impl Default for SmallModelSection {
    fn default() -> Self {
        Self { width_scale: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: NetworkConfig,
    pub train: TrainSection,
    pub scales: Vec<u32>,
    pub ae: AeSection,
    pub finetune: FinetuneSection,
    pub small_model: SmallModelSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: NetworkConfig::default(),
            train: TrainSection::default(),
            scales: vec![2, 4, 8],
            ae: AeSection::default(),
            finetune: FinetuneSection::default(),
            small_model: SmallModelSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dot-separated) in `root` to `raw`, parsed as JSON when it
/// parses and as a string otherwise. The path must already exist.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let mut node = root;
    for key in path.split('.') {
        node = match node {
            Value::Object(map) => map
                .get_mut(key)
                .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?,
            _ => return Err(Error::Config(format!("config key {path:?} descends into a non-object"))),
        };
    }
    *node = parse_value(raw);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::from_json_with_overrides(text, &[])
    }

    /// Parses `text` (empty means all defaults), applies `key=value`
    /// overrides, and validates.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let parsed: Self = if text.trim().is_empty() {
            Self::default()
        } else {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        let mut tree = serde_json::to_value(&parsed).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            apply_override(&mut tree, k.trim(), v.trim())?;
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_json_with_overrides(&text, overrides).map_err(|e| match path {
            Some(p) => e.context(format!("config {}", p.display())),
            None => e,
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn scale_factors(&self) -> Result<Vec<ScaleFactor>> {
        self.scales.iter().map(|&s| ScaleFactor::new(s)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let scales = self.scale_factors()?;
        self.schedule()?.validate()?;
        self.model.validate()?;
        self.small_model_config().validate()?;
        self.autoencoder_config().validate()?;
        if let DegradeMode::Lite(p) = &self.data.degrade_mode {
            p.validate()?;
        }
        if self.data.n_train == 0 {
            return bad("data.n_train must be >= 1".into());
        }
        let max_scale = scales.iter().map(|s| s.usize()).max().unwrap_or(1);
        let ae = self.autoencoder_config();
        let m = ae.f * self.model.spatial_multiple();
        if self.data.hr_size % m != 0 || self.data.hr_size % max_scale != 0 {
            return bad(format!(
                "data.hr_size {} must be divisible by {m} (autoencoder x U-Net) and by scale {max_scale}",
                self.data.hr_size
            ));
        }
        if self.model.out_channels != ae.latent_channels || self.model.in_channels != 2 * ae.latent_channels {
            return bad(format!(
                "model channels ({} in / {} out) must be 2x / 1x the latent channels ({})",
                self.model.in_channels, self.model.out_channels, ae.latent_channels
            ));
        }
        if self.eval.step_counts.is_empty() || self.eval.step_counts.contains(&0) || self.eval.batch == 0 {
            return bad("eval.step_counts must be non-empty with entries >= 1; eval.batch >= 1".into());
        }
        if self.train.batch == 0 || self.ae.batch == 0 || self.finetune.batch == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if !(self.small_model.width_scale > 0.0 && self.small_model.width_scale < 1.0) {
            return bad("small_model.width_scale must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// pFID needs this many eval images; commands that report it check this.
    pub fn check_eval_size(&self) -> Result<()> {
        if self.data.n_eval < PFID_MIN_SET {
            return Err(Error::Config(format!(
                "data.n_eval = {} but pFID needs >= {PFID_MIN_SET} images",
                self.data.n_eval
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<ScaleSchedule> {
        Ok(ScaleSchedule {
            scales: self.scale_factors()?,
            steps_per_stage: self.train.steps_per_stage,
            batch: self.train.batch,
            lr: self.train.lr,
            seed: self.train.seed,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig::new(self.train.steps_per_stage, self.train.batch, self.train.lr, self.train.seed)
    }

    pub fn small_model_config(&self) -> NetworkConfig {
        self.model.with_width_scale(self.model.width_scale * self.small_model.width_scale)
    }

    pub fn autoencoder_config(&self) -> AutoencoderConfig {
        match self.ae.mode {
            AEMode::Identity => AutoencoderConfig::identity(1),
            AEMode::Learned => AutoencoderConfig {
                mode: AEMode::Learned,
                latent_channels: self.ae.latent_channels,
                f: self.ae.f,
                image_channels: 1,
                base_channels: self.ae.base_channels,
            },
        }
    }

    pub fn ae_train_config(&self) -> AeTrainConfig {
        AeTrainConfig {
            steps: self.ae.steps,
            batch: self.ae.batch,
            lr: self.ae.lr,
            seed: self.ae.seed,
            crop: self.ae.crop,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            steps: self.finetune.steps,
            batch: self.finetune.batch,
            lr: self.finetune.lr,
            seed: self.finetune.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::from_json_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.data.hr_size, 32);
        assert_eq!(c.train.steps_per_stage, 6000);
        assert_eq!(c.eval.step_counts, vec![1, 2, 4, 8, 16]);
        let back = ExperimentConfig::from_json_str(&c.to_json_pretty()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json_str(r#"{"trian": {}}"#).is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"train": {"stpes": 3}}"#).is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"model": {"depht": 3}}"#).is_err());
    }

    #[test]
    fn overrides_win_and_are_checked() {
        let c = ExperimentConfig::from_json_with_overrides(
            r#"{"train": {"steps_per_stage": 10}}"#,
            &["train.steps_per_stage=20".into(), "scales=[2,4]".into(), "data.degrade_mode.kind=lite".into()],
        );
        // lite needs its parameters, so the bare kind switch must fail loudly
        assert!(c.is_err());
        let c = ExperimentConfig::from_json_with_overrides(
            r#"{"train": {"steps_per_stage": 10}}"#,
            &["train.steps_per_stage=20".into(), "scales=[2,4]".into()],
        )
        .unwrap();
        assert_eq!(c.train.steps_per_stage, 20);
        assert_eq!(c.scales, vec![2, 4]);
        assert!(ExperimentConfig::from_json_with_overrides("", &["train.nope=1".into()]).is_err());
        assert!(ExperimentConfig::from_json_with_overrides("", &["scales".into()]).is_err());
    }

    #[test]
    fn inconsistent_sizes_are_rejected() {
        assert!(ExperimentConfig::from_json_str(r#"{"data": {"hr_size": 36}}"#).is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"scales": [4, 2]}"#).is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"scales": [3]}"#).is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"ae": {"latent_channels": 3}}"#).is_err());
    }
}
