use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tryon_core::ablate::{ablate, AblationConfig};
use tryon_core::checkpoint::{load_checkpoint, read_checkpoint_manifest};
use tryon_core::config::{dataset_from_json, dataset_profile, Arm, EvalConfig, Profile, TrainConfig};
use tryon_core::eval::evaluate_checkpoint;
use tryon_core::imageio::{read_image, write_image};
use tryon_core::sampler::{SamplerConfig, SamplerInit, SamplerMode};
use tryon_core::train::train_with;
use tryon_core::triplet::build_dataset;
use tryon_core::{Error, Result};

/// Relative output paths resolve against this directory.
const OUTPUT_ROOT_ENV: &str = "TRYON_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "tryon", version, about = "Mask-free virtual try-on on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic triplet dataset.
    GenData(GenData),
    /// Train one ablation arm.
    Train(Train),
    /// Dress one person in one garment.
    Infer(Infer),
    /// Apply several garments in sequence.
    MultiInfer(MultiInfer),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(Eval),
    /// Train and compare all three arms.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, default_value = "desk")]
    profile: Profile,
    /// Leave the train and val splits unaugmented.
    #[arg(long)]
    no_augment: bool,
    /// JSON file overriding the profile's dataset settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    /// JSON training config; the profile applies when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    profile: Profile,
    #[arg(long)]
    arm: Option<Arm>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print a loss line every this many steps; 0 is silent.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    person: PathBuf,
    #[arg(long)]
    pose: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value = "deterministic")]
    mode: SamplerMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start from the source noised to this fraction of T instead of noise.
    #[arg(long)]
    init_strength: Option<f64>,
}

impl SampleArgs {
    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            mode: self.mode,
            init: match self.init_strength {
                Some(strength) => SamplerInit::SourceNoised { strength },
                None => SamplerInit::PureNoise,
            },
            ..SamplerConfig::default()
        }
    }
}

#[derive(Args)]
struct Infer {
    #[command(flatten)]
    sample: SampleArgs,
    #[arg(long)]
    garment: PathBuf,
}

#[derive(Args)]
struct MultiInfer {
    #[command(flatten)]
    sample: SampleArgs,
    /// Garments in application order.
    #[arg(long = "garment", required = true, num_args = 1..)]
    garments: Vec<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    profile: Profile,
    /// JSON file overriding the profile's evaluation settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the generated images here.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[arg(long, default_value = "desk")]
    profile: Profile,
    /// JSON file overriding the ablation settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 250)]
    log_every: usize,
}

fn output_path(p: Option<PathBuf>, default: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    match p {
        Some(p) if p.is_absolute() => p,
        Some(p) => root.join(p),
        None => root.join(default),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => dataset_from_json(&read_text(p)?, a.profile)?,
        None => dataset_profile(a.profile),
    };
    if let Some(c) = a.count {
        cfg.count = c;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.resolution {
        cfg.resolution = r;
    }
    if a.no_augment {
        cfg.augment = false;
    }
    cfg.validate()?;
    let out = output_path(a.out, "data");
    let m = build_dataset(&cfg, &out)?;
    println!("{}: {} samples, {} skipped", out.display(), m.samples.len(), m.skipped.len());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json(&read_text(p)?)?,
        None => TrainConfig::profile(a.profile),
    };
    if let Some(arm) = a.arm {
        cfg.arm = arm;
    }
    if let Some(d) = a.dataset {
        cfg.dataset = Some(d);
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.enforce_arm();
    cfg.validate()?;
    let out = output_path(a.out, &format!("runs/{}", cfg.arm.slug()));
    let every = a.log_every;
    let outcome = train_with(&cfg, &out, |r| {
        if every > 0 && r.step % every == 0 {
            eprintln!("step {:>6}  ldm {:.5}  ar {:.5}  total {:.5}", r.step, r.loss.ldm, r.loss.ar, r.loss.total);
        }
    })?;
    println!("{}", outcome.final_checkpoint().display());
    Ok(())
}

fn load_inputs(s: &SampleArgs) -> Result<(tryon_core::sampler::TryOnModel, tryon_core::tensor::ImageTensor, tryon_core::tensor::ImageTensor)> {
    let (model, _) = load_checkpoint(&s.checkpoint)?;
    Ok((model, read_image(&s.person)?, read_image(&s.pose)?))
}

fn infer(a: Infer) -> Result<()> {
    let (model, person, pose) = load_inputs(&a.sample)?;
    let garment = read_image(&a.garment)?;
    let img = model.try_on(&person, &pose, &garment, &a.sample.sampler(), a.sample.seed)?;
    write_image(&a.sample.out, &img)?;
    println!("{}", a.sample.out.display());
    Ok(())
}

fn multi_infer(a: MultiInfer) -> Result<()> {
    let (model, person, pose) = load_inputs(&a.sample)?;
    let garments = a.garments.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = garments.iter().collect();
    let img = model.multi_garment(&person, &pose, &refs, &a.sample.sampler(), a.sample.seed)?;
    write_image(&a.sample.out, &img)?;
    println!("{}", a.sample.out.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => EvalConfig::from_json(&read_text(p)?, a.profile)?,
        None => EvalConfig::profile(a.profile),
    };
    cfg.extractor.resolution = read_checkpoint_manifest(&a.checkpoint)?.config.resolution;
    let (report, images) = evaluate_checkpoint(&a.checkpoint, &a.dataset, &cfg)?;
    let out = output_path(a.out, "eval.json");
    write_json(&out, &report)?;
    if let Some(dir) = a.images {
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        for (s, img) in report.per_sample.iter().zip(&images) {
            write_image(&dir.join(format!("{}.png", s.id)), img)?;
        }
    }
    println!(
        "FID {:.4}  KID×100 {:.4} ± {:.4}  inside {:.4}  outside {:.4}  attn-outside {:.5}",
        report.metrics.fid,
        report.metrics.kid.value,
        report.metrics.kid.std_error,
        report.inside_mae,
        report.outside_mae,
        report.attention_outside_mass
    );
    println!("{}", out.display());
    Ok(())
}

fn run_ablate(a: Ablate) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => AblationConfig::from_json(&read_text(p)?)?,
        None => AblationConfig::profile(a.profile),
    };
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    cfg.train.validate()?;
    let out = output_path(a.out, "ablation");
    let every = a.log_every;
    let report = ablate(&cfg, &out, |arm, r| {
        if every > 0 && r.step % every == 0 {
            eprintln!("[{arm}] step {:>6}  ldm {:.5}  ar {:.5}", r.step, r.loss.ldm, r.loss.ar);
        }
    })?;
    print!("{}", report.table);
    println!("{}", out.join("comparison.md").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::MultiInfer(a) => multi_infer(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => run_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: invalid config: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
