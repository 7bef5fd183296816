//! Training configuration, ablation arms and the built-in profiles.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::garment::{GarmentEncoderConfig, WarmupConfig};
use crate::metrics::{ExtractorConfig, PolyKernel};
use crate::nn::AdamConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::{ScheduleConfig, ScheduleKind};
use crate::triplet::DatasetConfig;
use crate::unet::UNetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "wild_aug")]
    WildAug,
    #[serde(rename = "wild_aug+ar")]
    WildAugAr,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Base, Arm::WildAug, Arm::WildAugAr];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Base => "base",
            Arm::WildAug => "wild_aug",
            Arm::WildAugAr => "wild_aug+ar",
        }
    }

    /// Directory-safe form of the name.
    pub fn slug(self) -> &'static str {
        match self {
            Arm::Base => "base",
            Arm::WildAug => "wild_aug",
            Arm::WildAugAr => "wild_aug_ar",
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Arm::Base),
            "wild_aug" => Ok(Arm::WildAug),
            "wild_aug+ar" | "wild_aug_ar" => Ok(Arm::WildAugAr),
            other => Err(Error::config("arm", format!("unknown arm `{other}` (base, wild_aug, wild_aug+ar)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 64×64, 5000 steps at batch 16.
    Desk,
    /// The published optimizer settings on the desk model.
    Paper,
    /// A reduced model and schedule sized for a single CPU core.
    Smoke,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            "smoke" => Ok(Profile::Smoke),
            other => Err(Error::config("profile", format!("unknown profile `{other}` (desk, paper, smoke)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arm: Arm,
    pub resolution: usize,
    pub codec: Codec,
    pub schedule: ScheduleConfig,
    pub unet: UNetConfig,
    pub garment_encoder: GarmentEncoderConfig,
    pub warmup: WarmupConfig,
    pub optimizer: AdamConfig,
    /// Cosine decay from `optimizer.lr` to this fraction of it; 1 keeps it constant.
    pub final_lr_fraction: f64,
    pub batch: usize,
    pub steps: usize,
    pub lambda_ar: f64,
    /// Whether the training split must be augmented; fixed by the arm.
    pub augment: bool,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    /// Save a checkpoint every this many steps; 0 saves only the last.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let desk = Self {
            arm: Arm::WildAugAr,
            resolution: 64,
            codec: Codec::Identity,
            schedule: ScheduleConfig {
                steps: 200,
                kind: ScheduleKind::Linear,
                beta_start: 1e-4,
                beta_end: 2e-2,
            },
            unet: UNetConfig::default(),
            garment_encoder: GarmentEncoderConfig::default(),
            warmup: WarmupConfig::default(),
            optimizer: AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            },
            final_lr_fraction: 1.0,
            batch: 16,
            steps: 5000,
            lambda_ar: 1.0,
            augment: true,
            seed: 0,
            dataset: None,
            checkpoint_every: 1000,
        };
        match profile {
            Profile::Desk => desk,
            Profile::Paper => Self {
                optimizer: AdamConfig {
                    lr: 5e-6,
                    ..AdamConfig::default()
                },
                batch: 32,
                steps: 12000,
                checkpoint_every: 2000,
                ..desk
            },
            Profile::Smoke => Self {
                resolution: 32,
                unet: UNetConfig {
                    base_width: 16,
                    time_dim: 32,
                    attn_dim: 32,
                    token_dim: 32,
                    tokens: 16,
                    ..UNetConfig::default()
                },
                garment_encoder: GarmentEncoderConfig {
                    resolution: 32,
                    grid: 4,
                    token_dim: 32,
                    width: 8,
                },
                warmup: WarmupConfig {
                    steps: 150,
                    ..WarmupConfig::default()
                },
                optimizer: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                final_lr_fraction: 0.05,
                batch: 8,
                steps: 2000,
                checkpoint_every: 500,
                ..desk
            },
        }
    }

    /// The profile's config with `arm` applied.
    pub fn for_arm(profile: Profile, arm: Arm) -> Self {
        let mut c = Self::profile(profile);
        c.arm = arm;
        c.enforce_arm();
        c
    }

    /// Overrides the fields each arm fixes, whatever the file said.
    pub fn enforce_arm(&mut self) {
        match self.arm {
            Arm::Base => {
                self.augment = false;
                self.lambda_ar = 0.0;
            }
            Arm::WildAug => {
                self.augment = true;
                self.lambda_ar = 0.0;
            }
            Arm::WildAugAr => self.augment = true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lh, lw) = self.codec.latent_size(self.resolution, self.resolution);
        if self.resolution == 0 || lh % 4 != 0 || lw % 4 != 0 {
            return Err(Error::config("resolution", "latent size must be a multiple of 4"));
        }
        if self.garment_encoder.resolution != self.resolution {
            return Err(Error::config("garment_encoder.resolution", "must equal resolution"));
        }
        if self.unet.tokens != self.garment_encoder.tokens() {
            return Err(Error::config("unet.tokens", "must equal garment_encoder.grid²"));
        }
        if self.unet.token_dim != self.garment_encoder.token_dim {
            return Err(Error::config("unet.token_dim", "must equal garment_encoder.token_dim"));
        }
        if self.unet.latent_channels != 3 {
            return Err(Error::config("unet.latent_channels", "both codecs produce 3 channels"));
        }
        self.unet.validate()?;
        self.schedule.build()?;
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::config("final_lr_fraction", "must lie in (0, 1]"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if !(self.lambda_ar >= 0.0 && self.lambda_ar.is_finite()) {
            return Err(Error::config("lambda_ar", "must be finite and non-negative"));
        }
        if self.warmup.batch == 0 {
            return Err(Error::config("warmup.batch", "must be at least 1"));
        }
        Ok(())
    }

    /// Parses a JSON config. An optional top-level `"profile"` picks the base
    /// that the remaining keys override; nested objects merge key by key.
    pub fn from_json(text: &str) -> Result<Self> {
        let base = |p: Profile| Self::profile(p);
        let mut c: Self = merge_json(text, |v| {
            let profile = match v.as_object_mut().and_then(|o| o.remove("profile")) {
                None => Profile::Desk,
                Some(Value::String(s)) => s.parse()?,
                Some(_) => return Err(Error::config("profile", "must be a string")),
            };
            Ok(serde_json::to_value(base(profile))?)
        })?;
        c.enforce_arm();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn line_of(text: &str, path: &str) -> Option<usize> {
    let key = path.rsplit('.').next()?;
    let needle = format!("\"{key}\"");
    let offset = text.find(&needle)?;
    Some(text[..offset].matches('\n').count() + 1)
}

/// Overlays the JSON object in `text` on the defaults `base` builds from it,
/// reporting syntax errors by line and schema errors by field path.
pub(crate) fn merge_json<T: serde::de::DeserializeOwned>(
    text: &str,
    base: impl FnOnce(&mut Value) -> Result<Value>,
) -> Result<T> {
    let mut user: Value = serde_json::from_str(text)
        .map_err(|e| Error::config(format!("line {}, column {}", e.line(), e.column()), e.to_string()))?;
    if !user.is_object() {
        return Err(Error::config("<root>", "config must be a JSON object"));
    }
    let mut merged = base(&mut user)?;
    merge(&mut merged, user);
    serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        let field = match line_of(text, &path) {
            Some(l) => format!("{path} (line {l})"),
            None => path,
        };
        Error::config(field, e.into_inner().to_string())
    })
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    pub extractor: ExtractorConfig,
    pub kernel: PolyKernel,
    pub bootstrap_reps: usize,
    pub seed: u64,
    /// Samples generated per sampler batch.
    pub batch: usize,
    /// Noised test batches scored for attention mass outside the mask.
    pub attention_batches: usize,
}

impl EvalConfig {
    pub fn profile(profile: Profile) -> Self {
        let res = TrainConfig::profile(profile).resolution;
        let desk = Self {
            sampler: SamplerConfig::default(),
            extractor: ExtractorConfig {
                resolution: res,
                ..ExtractorConfig::default()
            },
            kernel: PolyKernel::default(),
            bootstrap_reps: 100,
            seed: 99,
            batch: 8,
            attention_batches: 4,
        };
        match profile {
            Profile::Desk | Profile::Paper => desk,
            Profile::Smoke => Self {
                sampler: SamplerConfig {
                    steps: 25,
                    ..SamplerConfig::default()
                },
                extractor: ExtractorConfig {
                    resolution: res,
                    widths: [8, 16, 16],
                    ..ExtractorConfig::default()
                },
                ..desk
            },
        }
    }
}

impl EvalConfig {
    /// Parses a JSON override of the given profile's evaluation settings.
    pub fn from_json(text: &str, profile: Profile) -> Result<Self> {
        merge_json(text, |_| Ok(serde_json::to_value(Self::profile(profile))?))
    }
}

/// Dataset settings per profile.
pub fn dataset_profile(profile: Profile) -> DatasetConfig {
    let res = TrainConfig::profile(profile).resolution;
    match profile {
        Profile::Desk | Profile::Paper => DatasetConfig {
            count: 200,
            resolution: res,
            ..DatasetConfig::default()
        },
        Profile::Smoke => DatasetConfig {
            count: 200,
            resolution: res,
            ..DatasetConfig::default()
        },
    }
}

/// Parses a JSON override of the given profile's dataset settings.
pub fn dataset_from_json(text: &str, profile: Profile) -> Result<DatasetConfig> {
    let c: DatasetConfig = merge_json(text, |_| Ok(serde_json::to_value(dataset_profile(profile))?))?;
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        for p in [Profile::Desk, Profile::Paper, Profile::Smoke] {
            for arm in Arm::ALL {
                TrainConfig::for_arm(p, arm).validate().unwrap();
            }
        }
        let paper = TrainConfig::profile(Profile::Paper);
        assert_eq!((paper.optimizer.lr, paper.batch, paper.steps, paper.lambda_ar), (5e-6, 32, 12000, 1.0));
        let desk = TrainConfig::profile(Profile::Desk);
        assert_eq!((desk.resolution, desk.schedule.steps, desk.batch, desk.steps), (64, 200, 16, 5000));
        assert_eq!(desk.codec, Codec::Identity);
    }

    #[test]
    fn arm_constraints_override_the_file() {
        let c = TrainConfig::from_json(r#"{"arm": "base", "augment": true, "lambda_ar": 3.0}"#).unwrap();
        assert!(!c.augment);
        assert_eq!(c.lambda_ar, 0.0);
        let c = TrainConfig::from_json(r#"{"arm": "wild_aug", "lambda_ar": 3.0}"#).unwrap();
        assert!(c.augment);
        assert_eq!(c.lambda_ar, 0.0);
        let c = TrainConfig::from_json(r#"{"arm": "wild_aug+ar", "lambda_ar": 3.0}"#).unwrap();
        assert_eq!(c.lambda_ar, 3.0);
    }

    #[test]
    fn profile_key_and_nested_merge() {
        let c = TrainConfig::from_json(r#"{"profile": "smoke", "unet": {"heads": 4}, "steps": 7}"#).unwrap();
        assert_eq!(c.resolution, 32);
        assert_eq!(c.unet.heads, 4);
        assert_eq!(c.unet.base_width, 16);
        assert_eq!(c.steps, 7);
    }

    #[test]
    fn diagnostics_name_line_or_field() {
        let msg = |text: &str| TrainConfig::from_json(text).unwrap_err().to_string();
        let m = msg("{\n  \"steps\": 5,\n  \"batch\": }");
        assert!(m.contains("line 3"), "{m}");
        let m = msg("{\n  \"unet\": {\n    \"base_widht\": 8\n  }\n}");
        assert!(m.contains("unet") && m.contains("base_widht"), "{m}");
        let m = msg(r#"{"optimizer": {"lr": "fast"}}"#);
        assert!(m.contains("optimizer.lr"), "{m}");
        let m = msg(r#"{"lambda_ar": -1.0}"#);
        assert!(m.contains("lambda_ar"), "{m}");
        let m = msg(r#"{"arm": "both"}"#);
        assert!(m.contains("arm"), "{m}");
        assert!(msg(r#"{"profile": "huge"}"#).contains("profile"));
        assert!(msg("[1, 2]").contains("object"));
    }
}
