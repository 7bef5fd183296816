//! The three-arm ablation: shared data, one training run per arm, and a
//! comparison on the augmented test split.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::read_checkpoint_manifest;
use crate::config::{dataset_profile, merge_json, Arm, EvalConfig, Profile, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::train::{ldm_head_tail, load_split, train_with, StepRecord};
use crate::triplet::{build_dataset, DatasetConfig, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub profile: Profile,
    pub arms: Vec<Arm>,
    pub train: TrainConfig,
    /// Augmentation flags are set per arm.
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
    /// Window for the first/last mean `L_LDM`.
    pub loss_window: usize,
}

impl AblationConfig {
    pub fn profile(profile: Profile) -> Self {
        Self {
            profile,
            arms: Arm::ALL.to_vec(),
            train: TrainConfig::profile(profile),
            dataset: dataset_profile(profile),
            eval: EvalConfig::profile(profile),
            loss_window: 100,
        }
    }

    /// Parses a JSON override; `"profile"` picks the base, default desk.
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = merge_json(text, |v| {
            let profile = match v.get("profile") {
                None => Profile::Desk,
                Some(serde_json::Value::String(s)) => s.parse()?,
                Some(_) => return Err(Error::config("profile", "must be a string")),
            };
            Ok(serde_json::to_value(Self::profile(profile))?)
        })?;
        c.train.validate()?;
        c.dataset.validate()?;
        if c.dataset.resolution != c.train.resolution || c.eval.extractor.resolution != c.train.resolution {
            return Err(Error::config("dataset.resolution", "dataset, train and extractor resolutions must agree"));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub run_dir: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    /// Garment-encoder parameter hash of every checkpoint, in order.
    pub encoder_hashes: Vec<String>,
    pub ldm_first: f64,
    pub ldm_last: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub profile: Profile,
    pub arms: Vec<ArmResult>,
    pub table: String,
}

impl AblationReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

/// Builds the clean and augmented datasets under `root/data`. Both share a
/// seed, so their test splits are identical and augmented.
pub fn build_ablation_data(cfg: &DatasetConfig, root: &Path) -> Result<(PathBuf, PathBuf)> {
    let clean = root.join("data").join("clean");
    let wild = root.join("data").join("wild");
    for (dir, augment) in [(&clean, false), (&wild, true)] {
        if !dir.join("manifest.json").exists() {
            build_dataset(&DatasetConfig { augment, augment_test: true, ..cfg.clone() }, dir)?;
        }
    }
    Ok((clean, wild))
}

pub fn comparison_table(arms: &[ArmResult]) -> String {
    let mut s = String::from(
        "| arm | FID | KID×100 (±SE) | inside MAE | outside MAE | out<in | attn outside | occluder MAE | L_LDM first→last |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for a in arms {
        let r = &a.report;
        let occ = r.occluder_mae.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} (±{:.4}) | {:.4} | {:.4} | {:.0}% | {:.5} | {} | {:.4}→{:.4} |\n",
            a.arm,
            r.metrics.fid,
            r.metrics.kid.value,
            r.metrics.kid.std_error,
            r.inside_mae,
            r.outside_mae,
            100.0 * r.outside_below_inside,
            r.attention_outside_mass,
            occ,
            a.ldm_first,
            a.ldm_last
        ));
    }
    s
}

/// Runs every arm end to end under `root`, writing `ablation.json` and
/// `comparison.md`. `on_step` receives each arm's log records.
pub fn ablate(cfg: &AblationConfig, root: &Path, mut on_step: impl FnMut(Arm, &StepRecord)) -> Result<AblationReport> {
    if cfg.arms.is_empty() {
        return Err(Error::Empty("arm list"));
    }
    let (clean, wild) = build_ablation_data(&cfg.dataset, root)?;
    let test = load_split(&wild, Split::Test)?;
    let mut arms = Vec::new();
    for &arm in &cfg.arms {
        let mut tc = cfg.train.clone();
        tc.arm = arm;
        tc.enforce_arm();
        tc.dataset = Some(if tc.augment { wild.clone() } else { clean.clone() });
        let run_dir = root.join("runs").join(arm.slug());
        let outcome = train_with(&tc, &run_dir, |r| on_step(arm, r))?;
        let encoder_hashes = outcome
            .checkpoints
            .iter()
            .map(|c| Ok(read_checkpoint_manifest(c)?.garment_encoder.param_hash))
            .collect::<Result<Vec<_>>>()?;
        let (ldm_first, ldm_last) = ldm_head_tail(&outcome.log, cfg.loss_window).unwrap_or((f64::NAN, f64::NAN));
        let (mut report, _) = evaluate(&outcome.model, &test, &cfg.eval)?;
        report.arm = Some(arm);
        report.checkpoint = Some(outcome.final_checkpoint().display().to_string());
        report.step = Some(tc.steps);
        let path = run_dir.join("eval.json");
        fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
        arms.push(ArmResult {
            arm,
            run_dir,
            checkpoints: outcome.checkpoints.clone(),
            encoder_hashes,
            ldm_first,
            ldm_last,
            report,
        });
    }
    let table = comparison_table(&arms);
    let report = AblationReport {
        profile: cfg.profile,
        arms,
        table,
    };
    let p = root.join("ablation.json");
    fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
    let p = root.join("comparison.md");
    fs::write(&p, &report.table).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}
