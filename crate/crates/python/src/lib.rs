use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use tryon_core::ablate::{ablate as run_ablation, AblationConfig};
use tryon_core::checkpoint::{load_checkpoint, read_checkpoint_manifest};
use tryon_core::config::{dataset_profile, Arm, EvalConfig, Profile, TrainConfig};
use tryon_core::eval::evaluate_checkpoint;
use tryon_core::imageio::{read_image, write_image};
use tryon_core::metrics::{self, FeatureMatrix, PolyKernel};
use tryon_core::sampler::{SamplerConfig, SamplerMode, TryOnModel};
use tryon_core::schedule::{build_schedule, forward_sample, NoiseSchedule, ScheduleKind};
use tryon_core::tensor::LatentTensor;
use tryon_core::train::train as run_training;
use tryon_core::triplet::{build_dataset, load_triplet as load_one};
use tryon_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Png { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// β/ᾱ schedule and the forward noising process.
#[pyclass(name = "NoiseSchedule")]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps = 200, beta_start = 1e-4, beta_end = 2e-2, kind = "linear"))]
    fn new(steps: usize, beta_start: f64, beta_end: f64, kind: &str) -> PyResult<Self> {
        let kind: ScheduleKind = parse(kind)?;
        Ok(Self {
            inner: build_schedule(steps, kind, beta_start, beta_end).map_err(py_err)?,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`, with `ᾱ_0 = 1`.
    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        if t > 0 {
            self.inner.check_t(t).map_err(py_err)?;
        }
        Ok(self.inner.alpha_bar(t))
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        if t == 0 {
            return Err(PyValueError::new_err("beta is defined for t ≥ 1"));
        }
        self.inner.check_t(t).map_err(py_err)?;
        Ok(self.inner.beta(t))
    }

    /// `√ᾱ_t·z0 + √(1−ᾱ_t)·eps` on flat `(c, h, w)` data.
    fn forward_sample(&self, z0: Vec<f64>, shape: (usize, usize, usize), t: usize, eps: Vec<f64>) -> PyResult<Vec<f64>> {
        let (c, h, w) = shape;
        let z0 = LatentTensor::new(c, h, w, z0).map_err(py_err)?;
        let eps = LatentTensor::new(c, h, w, eps).map_err(py_err)?;
        Ok(forward_sample(&z0, t, &eps, &self.inner).map_err(py_err)?.data().to_vec())
    }
}

/// A trained checkpoint ready for mask-free inference.
#[pyclass(name = "TryOnModel")]
struct PyModel {
    inner: TryOnModel,
    step: usize,
    arm: Arm,
}

fn sampler(steps: usize, mode: &str) -> PyResult<SamplerConfig> {
    let mode: SamplerMode = parse(mode)?;
    Ok(SamplerConfig {
        steps,
        mode,
        ..SamplerConfig::default()
    })
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let (inner, m) = load_checkpoint(&checkpoint).map_err(py_err)?;
        Ok(Self {
            inner,
            step: m.step,
            arm: m.config.arm,
        })
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.resolution
    }

    #[getter]
    fn step(&self) -> usize {
        self.step
    }

    #[getter]
    fn arm(&self) -> &'static str {
        self.arm.name()
    }

    #[getter]
    fn encoder_hash(&self) -> String {
        self.inner.encoder.hash()
    }

    /// Reads PNGs, dresses `person` in `garment` and writes `out`.
    #[pyo3(signature = (person, pose, garment, out, steps = 50, seed = 0, mode = "deterministic"))]
    fn try_on(&self, person: PathBuf, pose: PathBuf, garment: PathBuf, out: PathBuf, steps: usize, seed: u64, mode: &str) -> PyResult<()> {
        let cfg = sampler(steps, mode)?;
        let p = read_image(&person).map_err(py_err)?;
        let d = read_image(&pose).map_err(py_err)?;
        let c = read_image(&garment).map_err(py_err)?;
        let img = self.inner.try_on(&p, &d, &c, &cfg, seed).map_err(py_err)?;
        write_image(&out, &img).map_err(py_err)
    }

    #[pyo3(signature = (person, pose, garments, out, steps = 50, seed = 0, mode = "deterministic"))]
    fn multi_garment(
        &self,
        person: PathBuf,
        pose: PathBuf,
        garments: Vec<PathBuf>,
        out: PathBuf,
        steps: usize,
        seed: u64,
        mode: &str,
    ) -> PyResult<()> {
        let cfg = sampler(steps, mode)?;
        let p = read_image(&person).map_err(py_err)?;
        let d = read_image(&pose).map_err(py_err)?;
        let gs = garments.iter().map(|g| read_image(g)).collect::<Result<Vec<_>, _>>().map_err(py_err)?;
        let refs: Vec<_> = gs.iter().collect();
        let img = self.inner.multi_garment(&p, &d, &refs, &cfg, seed).map_err(py_err)?;
        write_image(&out, &img).map_err(py_err)
    }
}

fn profile_of(name: &str) -> PyResult<Profile> {
    parse(name)
}

/// Writes a dataset; returns `(written, skipped)`.
#[pyfunction]
#[pyo3(signature = (out, count = 100, seed = 0, profile = "desk", augment = true))]
fn generate_dataset(out: PathBuf, count: usize, seed: u64, profile: &str, augment: bool) -> PyResult<(usize, usize)> {
    let mut cfg = dataset_profile(profile_of(profile)?);
    cfg.count = count;
    cfg.seed = seed;
    cfg.augment = augment;
    let m = build_dataset(&cfg, &out).map_err(py_err)?;
    Ok((m.samples.len(), m.skipped.len()))
}

/// Summary of one stored triplet: id, size, mask area and occlusion flag.
#[pyfunction]
fn load_triplet(sample_dir: PathBuf) -> PyResult<(String, usize, usize, bool)> {
    let t = load_one(&sample_dir).map_err(py_err)?;
    t.check_invariants().map_err(py_err)?;
    Ok((t.id.clone(), t.person.height(), t.mask.area(), t.augmentation.is_some()))
}

/// The built-in training config of a profile and arm, as JSON.
#[pyfunction]
#[pyo3(signature = (profile = "desk", arm = "wild_aug+ar"))]
fn train_config(profile: &str, arm: &str) -> PyResult<String> {
    let c = TrainConfig::for_arm(profile_of(profile)?, parse(arm)?);
    serde_json::to_string_pretty(&c).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Trains from a JSON config; returns the final checkpoint directory.
#[pyfunction]
fn train(config_json: &str, out: PathBuf) -> PyResult<String> {
    let cfg = TrainConfig::from_json(config_json).map_err(py_err)?;
    let outcome = run_training(&cfg, &out).map_err(py_err)?;
    Ok(outcome.final_checkpoint().display().to_string())
}

/// Evaluates a checkpoint on a dataset's test split; returns the JSON report.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, profile = "desk"))]
fn evaluate(checkpoint: PathBuf, dataset: PathBuf, profile: &str) -> PyResult<String> {
    let mut cfg = EvalConfig::profile(profile_of(profile)?);
    cfg.extractor.resolution = read_checkpoint_manifest(&checkpoint).map_err(py_err)?.config.resolution;
    let (report, _) = evaluate_checkpoint(&checkpoint, &dataset, &cfg).map_err(py_err)?;
    serde_json::to_string_pretty(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Runs the three-arm comparison; returns the markdown table.
#[pyfunction]
#[pyo3(signature = (out, profile = "smoke", steps = None))]
fn ablate(out: PathBuf, profile: &str, steps: Option<usize>) -> PyResult<String> {
    let mut cfg = AblationConfig::profile(profile_of(profile)?);
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    Ok(run_ablation(&cfg, Path::new(&out), |_, _| {}).map_err(py_err)?.table)
}

fn features(rows: Vec<Vec<f64>>) -> PyResult<FeatureMatrix> {
    let m = rows.len();
    let q = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != q) {
        return Err(PyValueError::new_err("ragged feature rows"));
    }
    FeatureMatrix::new(m, q, rows.into_iter().flatten().collect(), "python").map_err(py_err)
}

/// Fréchet distance between Gaussian fits of two feature sets.
#[pyfunction]
fn fid(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::fid(&features(x)?, &features(y)?).map_err(py_err)
}

/// Unbiased polynomial-kernel MMD², times 100.
#[pyfunction]
#[pyo3(signature = (x, y, degree = 3))]
fn kid(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, degree: u32) -> PyResult<f64> {
    let k = PolyKernel { degree, ..PolyKernel::default() };
    metrics::kid(&features(x)?, &features(y)?, &k).map_err(py_err)
}

#[pymodule]
fn tryon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_triplet, m)?)?;
    m.add_function(wrap_pyfunction!(train_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(kid, m)?)?;
    Ok(())
}
