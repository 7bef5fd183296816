//! Variance schedule, the closed-form forward noising process, and training
//! timestep draws.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::InvalidSchedule(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            kind: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.kind, self.beta_start, self.beta_end)
    }
}

/// `β_t`, `α_t = 1 − β_t` and `ᾱ_t = Π α_s`, stored 0-based for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn build_schedule(steps: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::InvalidSchedule("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with the convention `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// `√ᾱ_t · z0 + √(1−ᾱ_t) · eps`.
pub fn forward_sample(z0: &LatentTensor, t: usize, eps: &LatentTensor, sched: &NoiseSchedule) -> Result<LatentTensor> {
    sched.check_t(t)?;
    forward_sample_with(z0, eps, sched.alpha_bar(t))
}

/// Forward sample at an explicit `ᾱ`, including the `ᾱ ∈ {0, 1}` limits.
pub fn forward_sample_with(z0: &LatentTensor, eps: &LatentTensor, alpha_bar: f64) -> Result<LatentTensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::shape(z0.dims(), eps.dims()));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
    let (c, h, w) = z0.dims();
    LatentTensor::new(c, h, w, data)
}

/// Uniform integer in `1..=T`.
pub fn sample_timestep(rng: &mut impl Rng, steps: usize) -> usize {
    rng.random_range(1..=steps.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, ScheduleKind::Linear, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
    }

    #[test]
    fn three_step_product() {
        let s = build_schedule(3, ScheduleKind::Linear, 0.1, 0.3).unwrap();
        assert!((s.alpha_bar(3) - 0.9 * 0.8 * 0.7).abs() < 1e-15);
        assert!((s.alpha_bar(3) - 0.504).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(build_schedule(0, ScheduleKind::Linear, 0.1, 0.2).is_err());
        assert!(build_schedule(5, ScheduleKind::Linear, 0.0, 0.2).is_err());
        assert!(build_schedule(5, ScheduleKind::Linear, 0.3, 0.2).is_err());
        assert!(build_schedule(5, ScheduleKind::Linear, 0.1, 1.0).is_err());
        assert!("cosine".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn schedule_invariants_for_default() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.betas().len(), 200);
        assert_eq!(s.alphas().len(), 200);
        assert_eq!(s.alpha_bars().len(), 200);
        assert_eq!(s.alpha_bar(1), s.alpha(1));
        assert!(s.betas().iter().all(|b| *b > 0.0 && *b < 1.0));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(200) > 0.0 && s.alpha_bar(200) < s.alpha_bar(1) && s.alpha_bar(1) < 1.0);
        for t in 1..=200 {
            let ab = s.alpha_bar(t);
            assert!((ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_sample_limits() {
        let z0 = LatentTensor::new(1, 1, 3, vec![0.1, 0.5, -0.2]).unwrap();
        let eps = LatentTensor::new(1, 1, 3, vec![1.0, -2.0, 0.3]).unwrap();
        assert_eq!(forward_sample_with(&z0, &eps, 1.0).unwrap(), z0);
        assert_eq!(forward_sample_with(&z0, &eps, 0.0).unwrap(), eps);
    }

    #[test]
    fn forward_sample_errors() {
        let s = build_schedule(10, ScheduleKind::Linear, 0.01, 0.1).unwrap();
        let z0 = LatentTensor::zeros(1, 2, 2);
        let bad = LatentTensor::zeros(1, 2, 3);
        assert!(matches!(forward_sample(&z0, 1, &bad, &s), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(forward_sample(&z0, 0, &z0, &s), Err(Error::TimestepOutOfRange { .. })));
        assert!(matches!(forward_sample(&z0, 11, &z0, &s), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn forward_is_affine_in_both_arguments() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draw = || {
            let d = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            LatentTensor::new(1, 2, 3, d).unwrap()
        };
        let (z0, eps) = (draw(), draw());
        let t = 77;
        let out = forward_sample(&z0, t, &eps, &s).unwrap();
        let a = s.alpha_bar(t).sqrt();
        let b = (1.0 - s.alpha_bar(t)).sqrt();
        for i in 0..6 {
            assert!((out.data()[i] - (a * z0.data()[i] + b * eps.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn timestep_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| sample_timestep(&mut rng, 1) == 1));
        let a: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..50).map(|_| sample_timestep(&mut r, 100)).collect()
        };
        let b: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..50).map(|_| sample_timestep(&mut r, 100)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn timestep_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 100];
        for _ in 0..100_000 {
            let t = sample_timestep(&mut rng, 100);
            assert!((1..=100).contains(&t));
            counts[t - 1] += 1;
        }
        // binomial(1e5, 1e-2): sigma = sqrt(1e5 * 0.01 * 0.99)
        let sigma = (100_000.0f64 * 0.01 * 0.99).sqrt();
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 5.0 * sigma, "bucket count {c}");
        }
    }
}
