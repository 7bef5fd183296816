//! Unpaired evaluation of a trained model on a test split.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::config::{Arm, EvalConfig};
use crate::error::{Error, Result};
use crate::metrics::{fid, kid_with_error, region_mae, weighted_region_mae, FeatureExtractor, KidEstimate, KID_SCALE};
use crate::objective::{batch_loss, TrainingExample};
use crate::sampler::{TryOnModel, TryOnRequest};
use crate::schedule::{forward_sample, sample_timestep};
use crate::tensor::{ImageTensor, LatentTensor};
use crate::train::load_split;
use crate::triplet::{Split, TryOnTriplet};
use crate::unet::ConditioningBundle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    /// Test sample whose garment was applied.
    pub garment_from: String,
    pub inside_mae: f64,
    pub outside_mae: f64,
    pub occluder_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetComparison {
    pub extractor: String,
    pub kernel: String,
    pub kid_scale: f64,
    pub real: usize,
    pub generated: usize,
    pub fid: f64,
    pub kid: KidEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: Option<Arm>,
    pub checkpoint: Option<String>,
    pub step: Option<usize>,
    pub samples: usize,
    pub metrics: SetComparison,
    pub inside_mae: f64,
    pub outside_mae: f64,
    /// Fraction of samples with outside-mask error below inside-mask error.
    pub outside_below_inside: f64,
    /// Mean localization loss over noised test batches.
    pub attention_outside_mass: f64,
    /// Error over fully occluded pixels, pooled over the split.
    pub occluder_mae: Option<f64>,
    pub occluded_samples: usize,
    pub per_sample: Vec<SampleScore>,
}

/// FID and KID between two image sets under one extractor.
pub fn compare_sets(real: &[&ImageTensor], generated: &[&ImageTensor], cfg: &EvalConfig) -> Result<SetComparison> {
    let ex = FeatureExtractor::new(cfg.extractor)?;
    let fr = ex.extract(real)?;
    let fg = ex.extract(generated)?;
    Ok(SetComparison {
        extractor: ex.id(),
        kernel: cfg.kernel.describe(ex.dims()),
        kid_scale: KID_SCALE,
        real: real.len(),
        generated: generated.len(),
        fid: fid(&fr, &fg)?,
        kid: kid_with_error(&fr, &fg, &cfg.kernel, cfg.bootstrap_reps, cfg.seed)?,
    })
}

/// Index of the garment donor for test sample `i`: the next sample, so no
/// person is dressed in the garment they wear.
pub fn donor(i: usize, n: usize) -> usize {
    (i + 1) % n
}

/// Generates unpaired try-ons for `test`; output `i` wears the garment of
/// sample [`donor`]`(i)`.
pub fn generate(model: &TryOnModel, test: &[TryOnTriplet], cfg: &EvalConfig) -> Result<Vec<ImageTensor>> {
    let n = test.len();
    let mut out = Vec::with_capacity(n);
    let batch = cfg.batch.max(1);
    for start in (0..n).step_by(batch) {
        let reqs: Vec<TryOnRequest<'_>> = (start..(start + batch).min(n))
            .map(|i| TryOnRequest {
                person: &test[i].person,
                pose: &test[i].pose,
                garment: &test[donor(i, n)].garment,
                seed: cfg.seed.wrapping_add(i as u64),
            })
            .collect();
        out.extend(model.try_on_batch(&reqs, &cfg.sampler)?);
    }
    Ok(out)
}

/// Mean localization loss of the model on noised test samples with their own
/// garments, as during training.
pub fn attention_outside_mass(model: &TryOnModel, test: &[TryOnTriplet], cfg: &EvalConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa77e);
    let batch = cfg.batch.max(1);
    let tokens: Vec<_> = test.iter().map(|t| model.garment_tokens(&t.garment)).collect::<Result<_>>()?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (k, start) in (0..test.len()).step_by(batch).enumerate() {
        if k >= cfg.attention_batches.max(1) {
            break;
        }
        let mut examples = Vec::new();
        for i in start..(start + batch).min(test.len()) {
            let t = &test[i];
            let z0 = model.latent(&t.person)?;
            let (c, h, w) = z0.dims();
            let eps = LatentTensor::new(c, h, w, (0..c * h * w).map(|_| StandardNormal.sample(&mut rng)).collect())?;
            let step = sample_timestep(&mut rng, model.schedule.steps());
            examples.push(TrainingExample {
                bundle: ConditioningBundle::new(
                    forward_sample(&z0, step, &eps, &model.schedule)?,
                    model.latent(&t.pose)?,
                    model.latent(&t.person_prime)?,
                )?,
                t: step,
                eps,
                tokens: &tokens[i],
                mask: &t.mask,
            });
        }
        sum += batch_loss(&model.unet, &examples, 0.0)?.ar * examples.len() as f64;
        count += examples.len();
    }
    Ok(sum / count as f64)
}

pub fn evaluate(model: &TryOnModel, test: &[TryOnTriplet], cfg: &EvalConfig) -> Result<(EvalReport, Vec<ImageTensor>)> {
    if test.len() < 2 {
        return Err(Error::Empty("test split (need at least 2 samples)"));
    }
    let generated = generate(model, test, cfg)?;
    let real: Vec<&ImageTensor> = test.iter().map(|t| &t.person).collect();
    let gen: Vec<&ImageTensor> = generated.iter().collect();
    let metrics = compare_sets(&real, &gen, cfg)?;

    let mut per_sample = Vec::with_capacity(test.len());
    let (mut occ_sum, mut occ_px, mut occluded) = (0.0, 0usize, 0usize);
    for (i, (t, g)) in test.iter().zip(&generated).enumerate() {
        let source = t.person.rgb();
        let alpha = t.occluder_alpha();
        let occ = weighted_region_mae(g, &source, &alpha)?;
        if let Some(v) = occ {
            let px = alpha.iter().filter(|&&a| a == 1.0).count();
            occ_sum += v * px as f64;
            occ_px += px;
            occluded += 1;
        }
        per_sample.push(SampleScore {
            id: t.id.clone(),
            garment_from: test[donor(i, test.len())].id.clone(),
            inside_mae: region_mae(g, &source, &t.mask, true)?,
            outside_mae: region_mae(g, &source, &t.mask, false)?,
            occluder_mae: occ,
        });
    }
    let n = per_sample.len() as f64;
    let report = EvalReport {
        arm: None,
        checkpoint: None,
        step: None,
        samples: test.len(),
        metrics,
        inside_mae: per_sample.iter().map(|s| s.inside_mae).sum::<f64>() / n,
        outside_mae: per_sample.iter().map(|s| s.outside_mae).sum::<f64>() / n,
        outside_below_inside: per_sample.iter().filter(|s| s.outside_mae < s.inside_mae).count() as f64 / n,
        attention_outside_mass: attention_outside_mass(model, test, cfg)?,
        occluder_mae: (occ_px > 0).then(|| occ_sum / occ_px as f64),
        occluded_samples: occluded,
        per_sample,
    };
    Ok((report, generated))
}

/// Evaluates a checkpoint directory on the test split of a dataset.
pub fn evaluate_checkpoint(checkpoint: &Path, dataset: &Path, cfg: &EvalConfig) -> Result<(EvalReport, Vec<ImageTensor>)> {
    let (model, manifest) = load_checkpoint(checkpoint)?;
    let test = load_split(dataset, Split::Test)?;
    let (mut report, images) = evaluate(&model, &test, cfg)?;
    report.arm = Some(manifest.config.arm);
    report.checkpoint = Some(checkpoint.display().to_string());
    report.step = Some(manifest.step);
    Ok((report, images))
}
