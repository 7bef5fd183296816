use std::fs;
use std::path::Path;

use tryon_core::checkpoint::{load_checkpoint, read_checkpoint_manifest};
use tryon_core::config::{Arm, EvalConfig, Profile, TrainConfig};
use tryon_core::eval::{compare_sets, evaluate, evaluate_checkpoint};
use tryon_core::garment::GarmentEncoderConfig;
use tryon_core::metrics::ExtractorConfig;
use tryon_core::sampler::SamplerConfig;
use tryon_core::train::{initial_unet, load_split, read_log, train};
use tryon_core::triplet::{build_dataset, DatasetConfig, Split};
use tryon_core::unet::UNetConfig;
use tryon_core::Error;

fn tiny(arm: Arm, data: &Path, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::for_arm(Profile::Smoke, arm);
    c.resolution = 16;
    c.unet = UNetConfig {
        base_width: 4,
        time_dim: 8,
        attn_dim: 8,
        token_dim: 8,
        tokens: 4,
        ..UNetConfig::default()
    };
    c.garment_encoder = GarmentEncoderConfig {
        resolution: 16,
        grid: 2,
        token_dim: 8,
        width: 4,
    };
    c.warmup.steps = 3;
    c.batch = 2;
    c.steps = steps;
    c.checkpoint_every = 2;
    c.dataset = Some(data.to_path_buf());
    c
}

fn tiny_eval() -> EvalConfig {
    EvalConfig {
        sampler: SamplerConfig {
            steps: 3,
            ..SamplerConfig::default()
        },
        extractor: ExtractorConfig {
            resolution: 16,
            widths: [4, 4, 4],
            ..ExtractorConfig::default()
        },
        bootstrap_reps: 20,
        ..EvalConfig::profile(Profile::Smoke)
    }
}

fn data(root: &Path, augment: bool) -> std::path::PathBuf {
    let dir = root.join(if augment { "wild" } else { "clean" });
    let cfg = DatasetConfig {
        count: 24,
        seed: 5,
        resolution: 16,
        augment,
        ..DatasetConfig::default()
    };
    build_dataset(&cfg, &dir).unwrap();
    dir
}

#[test]
fn zero_steps_keeps_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let wild = data(tmp.path(), true);
    let cfg = tiny(Arm::WildAugAr, &wild, 0);
    let out = train(&cfg, &tmp.path().join("run")).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.checkpoints.len(), 1);
    let (model, m) = load_checkpoint(out.final_checkpoint()).unwrap();
    assert_eq!(m.step, 0);
    assert_eq!(model.unet.params(), &initial_unet(&cfg).unwrap());
    assert_eq!(fs::read_to_string(tmp.path().join("run/train_log.jsonl")).unwrap(), "");
}

#[test]
fn training_is_deterministic_and_encoder_stays_frozen() {
    let tmp = tempfile::tempdir().unwrap();
    let wild = data(tmp.path(), true);
    let cfg = tiny(Arm::WildAugAr, &wild, 5);
    let a = train(&cfg, &tmp.path().join("a")).unwrap();
    let b = train(&cfg, &tmp.path().join("b")).unwrap();
    assert_eq!(a.log.len(), 5);
    for (x, y) in a.log.iter().zip(&b.log) {
        assert!((x.loss.total - y.loss.total).abs() <= 1e-12);
        assert_eq!(x.batch, y.batch);
    }
    assert_eq!(
        fs::read(tmp.path().join("a/train_log.jsonl")).unwrap(),
        fs::read(tmp.path().join("b/train_log.jsonl")).unwrap()
    );
    assert_eq!(read_log(&tmp.path().join("a/train_log.jsonl")).unwrap(), a.log);
    // Checkpoints at steps 2, 4 and the final 5.
    assert_eq!(a.checkpoints.len(), 3);
    let hashes: Vec<String> = a
        .checkpoints
        .iter()
        .map(|c| read_checkpoint_manifest(c).unwrap().garment_encoder.param_hash)
        .collect();
    assert!(hashes.iter().all(|h| h == &hashes[0]));
    assert_eq!(hashes[0], a.model.encoder.hash());
    let unets: Vec<String> = a
        .checkpoints
        .iter()
        .map(|c| read_checkpoint_manifest(c).unwrap().tryon_unet.param_hash)
        .collect();
    assert_ne!(unets[0], unets[2]);
}

#[test]
fn arms_diverge_at_the_first_step() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = data(tmp.path(), false);
    let wild = data(tmp.path(), true);
    let base = train(&tiny(Arm::Base, &clean, 1), &tmp.path().join("base")).unwrap();
    let ar = train(&tiny(Arm::WildAugAr, &wild, 1), &tmp.path().join("ar")).unwrap();
    assert_eq!(base.log[0].loss.lambda_ar, 0.0);
    assert_eq!(ar.log[0].loss.lambda_ar, 1.0);
    assert_ne!(base.log[0].loss.total, ar.log[0].loss.total);
}

#[test]
fn arm_dataset_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let wild = data(tmp.path(), true);
    let err = train(&tiny(Arm::Base, &wild, 1), &tmp.path().join("x")).unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn divergence_aborts_with_the_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let wild = data(tmp.path(), true);
    let mut cfg = tiny(Arm::WildAug, &wild, 10);
    cfg.optimizer.lr = 1e200;
    match train(&cfg, &tmp.path().join("nan")) {
        Err(Error::NonFiniteLoss { step, batch }) => {
            assert!(step >= 2);
            assert_eq!(batch.len(), 2);
            assert!(tmp.path().join("nan/nonfinite_batch.json").exists());
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn evaluation_identity_and_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let wild = data(tmp.path(), true);
    let out = train(&tiny(Arm::WildAugAr, &wild, 2), &tmp.path().join("run")).unwrap();
    let cfg = tiny_eval();

    let train_set = load_split(&wild, Split::Train).unwrap();
    let imgs: Vec<_> = train_set.iter().map(|t| &t.person).collect();
    let same = compare_sets(&imgs, &imgs, &cfg).unwrap();
    assert!(same.fid.abs() <= 1e-6, "{}", same.fid);
    assert!(same.kid.value.abs() <= 3.0 * same.kid.std_error + 1e-12);

    let (r1, g1) = evaluate_checkpoint(out.final_checkpoint(), &wild, &cfg).unwrap();
    let (r2, g2) = evaluate_checkpoint(out.final_checkpoint(), &wild, &cfg).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(g1, g2);
    assert_eq!(r1.arm, Some(Arm::WildAugAr));
    assert_eq!(r1.samples, load_split(&wild, Split::Test).unwrap().len());
    assert!(r1.per_sample.iter().all(|s| s.id != s.garment_from));
    assert!(r1.attention_outside_mass > 0.0 && r1.attention_outside_mass < 1.0);
    assert!(evaluate(&out.model, &[], &cfg).is_err());
}
