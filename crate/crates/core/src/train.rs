//! The training loop: warm up and freeze the garment encoder, then fit the
//! denoiser on the dataset's train split.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::garment::{pretrain_warmup_report, GarmentEncoder, GarmentTokens, WarmupReport};
use crate::losses::{LossBreakdown, TryOnMask};
use crate::nn::{Adam, ParamStore};
use crate::objective::{batch_loss_and_grads, TrainingExample};
use crate::sampler::TryOnModel;
use crate::schedule::{forward_sample, sample_timestep};
use crate::tensor::{ImageTensor, LatentTensor};
use crate::triplet::{load_entry, read_manifest, Split, TryOnTriplet};
use crate::unet::{ConditioningBundle, TryOnUNet};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub batch: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TryOnModel,
    pub checkpoints: Vec<PathBuf>,
    pub log: Vec<StepRecord>,
    pub warmup: WarmupReport,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &Path {
        self.checkpoints.last().expect("training always writes a checkpoint")
    }
}

/// Encoded, frozen inputs for one training triplet.
struct Prepared {
    id: String,
    z0: LatentTensor,
    pose: LatentTensor,
    source: LatentTensor,
    tokens: GarmentTokens,
    mask: TryOnMask,
}

pub fn load_split(root: &Path, split: Split) -> Result<Vec<TryOnTriplet>> {
    let manifest = read_manifest(root)?;
    manifest.split(split).map(|e| load_entry(root, e)).collect()
}

fn std_normal(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> LatentTensor {
    let (c, h, w) = dims;
    let data = (0..c * h * w).map(|_| StandardNormal.sample(&mut *rng)).collect();
    LatentTensor::new(c, h, w, data).expect("finite")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:06}"))
}

/// Seeds of the independent random streams of one run.
fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream)
}

pub fn train(config: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    train_with(config, out, |_| {})
}

/// Trains and writes `config.json`, `warmup.json`, `train_log.jsonl` and
/// checkpoints under `out`. `on_step` sees every log record.
pub fn train_with(config: &TrainConfig, out: &Path, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    let mut config = config.clone();
    config.enforce_arm();
    config.validate()?;
    let root = config
        .dataset
        .clone()
        .ok_or_else(|| Error::config("dataset", "a dataset path is required"))?;
    let manifest = read_manifest(&root)?;
    if manifest.config.resolution != config.resolution {
        return Err(Error::config("resolution", format!("dataset is {}px", manifest.config.resolution)));
    }
    if manifest.config.augment != config.augment {
        return Err(Error::config(
            "dataset",
            format!("arm {} needs augment={}, dataset has augment={}", config.arm, config.augment, manifest.config.augment),
        ));
    }
    let train_set: Vec<TryOnTriplet> = manifest.split(Split::Train).map(|e| load_entry(&root, e)).collect::<Result<_>>()?;
    if train_set.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let val_garments: Vec<ImageTensor> = manifest
        .split(Split::Val)
        .map(|e| load_entry(&root, e).map(|t| t.garment))
        .collect::<Result<_>>()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("config.json"), &config)?;

    let garments: Vec<ImageTensor> = train_set.iter().map(|t| t.garment.rgb()).collect();
    let init = GarmentEncoder::init(config.garment_encoder, stream_seed(config.seed, 1))?;
    let (encoder, warmup) = pretrain_warmup_report(&init, &garments, &val_garments, &config.warmup)?;
    write_json(&out.join("warmup.json"), &warmup)?;
    let mut model = TryOnModel {
        codec: config.codec,
        schedule: config.schedule.build()?,
        unet: TryOnUNet::init(config.unet, stream_seed(config.seed, 2))?,
        encoder,
        resolution: config.resolution,
    };
    let frozen_hash = model.encoder.hash();

    let prepared: Vec<Prepared> = train_set
        .iter()
        .map(|t| {
            Ok(Prepared {
                id: t.id.clone(),
                z0: model.latent(&t.person)?,
                pose: model.latent(&t.pose)?,
                source: model.latent(&t.person_prime)?,
                tokens: model.garment_tokens(&t.garment)?,
                mask: t.mask.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let log_path = out.join("train_log.jsonl");
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut adam = Adam::new(config.optimizer, model.unet.params());
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, 3));
    let mut log = Vec::with_capacity(config.steps);
    let mut checkpoints = Vec::new();
    let save = |model: &TryOnModel, step: usize, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        if model.encoder.hash() != frozen_hash {
            return Err(Error::HashMismatch { path: "garment encoder changed during training".into() });
        }
        let dir = checkpoint_dir(out, step);
        save_checkpoint(&dir, model, &config, step)?;
        checkpoints.push(dir);
        Ok(())
    };
    let big_t = model.schedule.steps();
    for step in 1..=config.steps {
        adam.set_lr(learning_rate(&config, step));
        let picks: Vec<usize> = (0..config.batch).map(|_| rng.random_range(0..prepared.len())).collect();
        let mut examples = Vec::with_capacity(picks.len());
        for &i in &picks {
            let p = &prepared[i];
            let t = sample_timestep(&mut rng, big_t);
            let eps = std_normal(&mut rng, p.z0.dims());
            let z_t = forward_sample(&p.z0, t, &eps, &model.schedule)?;
            examples.push(TrainingExample {
                bundle: ConditioningBundle::new(z_t, p.pose.clone(), p.source.clone())?,
                t,
                eps,
                tokens: &p.tokens,
                mask: &p.mask,
            });
        }
        let ids: Vec<String> = picks.iter().map(|&i| prepared[i].id.clone()).collect();
        let (loss, grads) = batch_loss_and_grads(&model.unet, &examples, config.lambda_ar)?;
        if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            let ts: Vec<usize> = examples.iter().map(|e| e.t).collect();
            let dump = serde_json::json!({ "step": step, "batch": ids, "t": ts, "loss": loss });
            write_json(&out.join("nonfinite_batch.json"), &dump)?;
            return Err(Error::NonFiniteLoss { step, batch: ids });
        }
        adam.step(model.unet.params_mut(), &grads);
        let record = StepRecord { step, loss, batch: ids };
        writeln!(log_file, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&log_path, e))?;
        on_step(&record);
        log.push(record);
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step != config.steps {
            save(&model, step, &mut checkpoints)?;
        }
    }
    save(&model, config.steps, &mut checkpoints)?;
    Ok(TrainOutcome {
        model,
        checkpoints,
        log,
        warmup,
    })
}

/// Learning rate used for `step` (1-based).
pub fn learning_rate(config: &TrainConfig, step: usize) -> f64 {
    let lr = config.optimizer.lr;
    if config.final_lr_fraction >= 1.0 || config.steps <= 1 {
        return lr;
    }
    let progress = (step - 1) as f64 / (config.steps - 1) as f64;
    let f = config.final_lr_fraction;
    lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Mean `L_LDM` over the first and the last `window` steps.
pub fn ldm_head_tail(log: &[StepRecord], window: usize) -> Option<(f64, f64)> {
    if log.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(log.len());
    let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss.ldm).sum::<f64>() / s.len() as f64;
    Some((mean(&log[..w]), mean(&log[log.len() - w..])))
}

/// Parameters as they are before the first optimizer step.
pub fn initial_unet(config: &TrainConfig) -> Result<ParamStore> {
    Ok(TryOnUNet::init(config.unet, stream_seed(config.seed, 2))?.params().clone())
}
