//! Mask-free inference: from noise to a dressed person, conditioned only on
//! the source person, its pose map and the garment image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::garment::{GarmentEncoder, GarmentTokens};
use crate::schedule::{forward_sample, NoiseSchedule};
use crate::tensor::{ImageTensor, LatentTensor};
use crate::unet::{ConditioningBundle, TryOnUNet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    #[default]
    Deterministic,
    Ancestral,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" | "ddim" => Ok(SamplerMode::Deterministic),
            "ancestral" | "ddpm" => Ok(SamplerMode::Ancestral),
            other => Err(Error::InvalidArgument(format!("unknown sampler mode `{other}`"))),
        }
    }
}

/// `ẑ₀ = (z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(z_t: &LatentTensor, eps_hat: &LatentTensor, alpha_bar: f64) -> Result<LatentTensor> {
    if z_t.dims() != eps_hat.dims() {
        return Err(Error::shape(z_t.dims(), eps_hat.dims()));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = z_t.data().iter().zip(eps_hat.data()).map(|(z, e)| (z - b * e) / a).collect();
    let (c, h, w) = z_t.dims();
    LatentTensor::new(c, h, w, data)
}

/// One reverse step from `t` to `t_prev < t`.
///
/// Deterministic mode is the DDIM update. Ancestral mode adds posterior noise
/// with `σ² = (1−ᾱ_prev)/(1−ᾱ_t) · (1 − ᾱ_t/ᾱ_prev)`, which for
/// `t_prev = t − 1` is the DDPM posterior variance. `noise` is required in
/// ancestral mode and ignored otherwise.
pub fn denoise_step_to(
    z_t: &LatentTensor,
    t: usize,
    t_prev: usize,
    eps_hat: &LatentTensor,
    sched: &NoiseSchedule,
    mode: SamplerMode,
    noise: Option<&LatentTensor>,
) -> Result<LatentTensor> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("t_prev {t_prev} must be below t {t}")));
    }
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let x0 = predict_x0(z_t, eps_hat, ab)?;
    let sigma2 = match mode {
        SamplerMode::Deterministic => 0.0,
        SamplerMode::Ancestral => ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0),
    };
    let dir = (1.0 - ab_prev - sigma2).max(0.0).sqrt();
    let sigma = sigma2.sqrt();
    let noise = match mode {
        SamplerMode::Ancestral if sigma > 0.0 => {
            let n = noise.ok_or_else(|| Error::InvalidArgument("ancestral step needs noise".into()))?;
            if n.dims() != z_t.dims() {
                return Err(Error::shape(z_t.dims(), n.dims()));
            }
            Some(n.data())
        }
        _ => None,
    };
    let a = ab_prev.sqrt();
    let data = x0
        .data()
        .iter()
        .zip(eps_hat.data())
        .enumerate()
        .map(|(i, (x, e))| a * x + dir * e + noise.map_or(0.0, |n| sigma * n[i]))
        .collect();
    let (c, h, w) = z_t.dims();
    LatentTensor::new(c, h, w, data)
}

/// Single-step form `t → t − 1`.
pub fn denoise_step(
    z_t: &LatentTensor,
    t: usize,
    eps_hat: &LatentTensor,
    sched: &NoiseSchedule,
    mode: SamplerMode,
    noise: Option<&LatentTensor>,
) -> Result<LatentTensor> {
    denoise_step_to(z_t, t, t - t.min(1), eps_hat, sched, mode, noise)
}

/// `steps` timesteps evenly spaced over `start..=1`, descending and distinct.
pub fn strided_timesteps(start: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || start == 0 {
        return Err(Error::InvalidArgument("sampling needs at least one step".into()));
    }
    let steps = steps.min(start);
    if steps == 1 {
        return Ok(vec![start]);
    }
    let mut out: Vec<usize> = (0..steps)
        .map(|i| {
            let f = i as f64 / (steps - 1) as f64;
            (start as f64 - f * (start - 1) as f64).round() as usize
        })
        .collect();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerInit {
    /// Start from `N(0, I)` at `t = T`.
    PureNoise,
    /// Start from the source latent noised to `t = strength · T`.
    SourceNoised { strength: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub mode: SamplerMode,
    pub init: SamplerInit,
    /// Clip `ẑ₀` to the normalized data range at every step.
    pub clip_x0: bool,
    /// Guidance against zeroed garment tokens; `None` disables it.
    pub guidance_scale: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            mode: SamplerMode::Deterministic,
            init: SamplerInit::PureNoise,
            clip_x0: true,
            guidance_scale: None,
        }
    }
}

/// Everything inference needs: codec, schedule, denoiser and frozen
/// garment encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TryOnModel {
    pub codec: Codec,
    pub schedule: NoiseSchedule,
    pub unet: TryOnUNet,
    pub encoder: GarmentEncoder,
    pub resolution: usize,
}

/// Latents are diffused in `[−1, 1]`: `z = 2·E(x) − 1`.
pub fn normalize_latent(z: &LatentTensor) -> LatentTensor {
    let (c, h, w) = z.dims();
    LatentTensor::new(c, h, w, z.data().iter().map(|v| 2.0 * v - 1.0).collect()).expect("finite")
}

pub fn denormalize_latent(z: &LatentTensor) -> LatentTensor {
    let (c, h, w) = z.dims();
    LatentTensor::new(c, h, w, z.data().iter().map(|v| (v + 1.0) / 2.0).collect()).expect("finite")
}

fn std_normal(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> LatentTensor {
    let (c, h, w) = dims;
    let data = (0..c * h * w).map(|_| StandardNormal.sample(rng)).collect();
    LatentTensor::new(c, h, w, data).expect("finite")
}

/// One inference request.
#[derive(Clone, Copy, Debug)]
pub struct TryOnRequest<'a> {
    pub person: &'a ImageTensor,
    pub pose: &'a ImageTensor,
    pub garment: &'a ImageTensor,
    pub seed: u64,
}

impl TryOnModel {
    fn check_image(&self, img: &ImageTensor, what: &str) -> Result<()> {
        if img.height() != self.resolution || img.width() != self.resolution {
            return Err(Error::InvalidArgument(format!(
                "{what} is {}x{}, model expects {r}x{r}",
                img.height(),
                img.width(),
                r = self.resolution
            )));
        }
        Ok(())
    }

    pub fn latent(&self, img: &ImageTensor) -> Result<LatentTensor> {
        Ok(normalize_latent(&self.codec.encode(&img.rgb())?))
    }

    pub fn image(&self, z: &LatentTensor) -> Result<ImageTensor> {
        self.codec.decode(&denormalize_latent(z), self.resolution, self.resolution)
    }

    pub fn garment_tokens(&self, garment: &ImageTensor) -> Result<GarmentTokens> {
        self.encoder.encode(&garment.rgb())
    }

    /// Generates a batch of try-ons in lockstep; each request has its own seed.
    pub fn try_on_batch(&self, requests: &[TryOnRequest<'_>], cfg: &SamplerConfig) -> Result<Vec<ImageTensor>> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let sched = &self.schedule;
        let big_t = sched.steps();
        let mut bundles = Vec::with_capacity(requests.len());
        let mut rngs = Vec::with_capacity(requests.len());
        let mut tokens = Vec::with_capacity(requests.len());
        let start = match cfg.init {
            SamplerInit::PureNoise => big_t,
            SamplerInit::SourceNoised { strength } => {
                if !(strength > 0.0 && strength <= 1.0) {
                    return Err(Error::InvalidArgument(format!("init strength {strength} outside (0, 1]")));
                }
                ((strength * big_t as f64).round() as usize).clamp(1, big_t)
            }
        };
        for r in requests {
            self.check_image(r.person, "person")?;
            self.check_image(r.pose, "pose")?;
            self.check_image(r.garment, "garment")?;
            let source = self.latent(r.person)?;
            let pose = self.latent(r.pose)?;
            let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
            let noise = std_normal(&mut rng, source.dims());
            let z = match cfg.init {
                SamplerInit::PureNoise => noise,
                SamplerInit::SourceNoised { .. } => forward_sample(&source, start, &noise, sched)?,
            };
            bundles.push(ConditioningBundle::new(z, pose, source)?);
            tokens.push(self.garment_tokens(r.garment)?);
            rngs.push(rng);
        }
        let null_tokens: Vec<GarmentTokens> = tokens
            .iter()
            .map(|t| GarmentTokens {
                tokens: t.tokens,
                dim: t.dim,
                data: vec![0.0; t.data.len()],
            })
            .collect();
        let ts = strided_timesteps(start, cfg.steps)?;
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(i + 1).copied().unwrap_or(0);
            let eps = self.eps_batch(&bundles, t, &tokens, &null_tokens, cfg.guidance_scale)?;
            for ((b, e), rng) in bundles.iter_mut().zip(eps).zip(rngs.iter_mut()) {
                let e = if cfg.clip_x0 { clip_eps(b.z_t(), &e, sched.alpha_bar(t))? } else { e };
                let noise = match cfg.mode {
                    SamplerMode::Ancestral => Some(std_normal(rng, b.z_t().dims())),
                    SamplerMode::Deterministic => None,
                };
                let z_prev = denoise_step_to(b.z_t(), t, t_prev, &e, sched, cfg.mode, noise.as_ref())?;
                *b = b.with_z_t(z_prev)?;
            }
        }
        bundles.iter().map(|b| self.image(b.z_t())).collect()
    }

    fn eps_batch(
        &self,
        bundles: &[ConditioningBundle],
        t: usize,
        tokens: &[GarmentTokens],
        null_tokens: &[GarmentTokens],
        guidance: Option<f64>,
    ) -> Result<Vec<LatentTensor>> {
        let refs: Vec<&ConditioningBundle> = bundles.iter().collect();
        let ts = vec![t; bundles.len()];
        let tk: Vec<&GarmentTokens> = tokens.iter().collect();
        let cond: Vec<LatentTensor> = self
            .unet
            .predict_noise_batch(&refs, &ts, &tk, &self.schedule)?
            .into_iter()
            .map(|(e, _)| e)
            .collect();
        let Some(s) = guidance else {
            return Ok(cond);
        };
        let nk: Vec<&GarmentTokens> = null_tokens.iter().collect();
        let uncond = self.unet.predict_noise_batch(&refs, &ts, &nk, &self.schedule)?;
        cond.iter()
            .zip(uncond)
            .map(|(c, (u, _))| {
                let (ch, h, w) = c.dims();
                let data = c.data().iter().zip(u.data()).map(|(c, u)| u + s * (c - u)).collect();
                LatentTensor::new(ch, h, w, data)
            })
            .collect()
    }

    /// Dresses `person` in `garment`. No mask is read at any point.
    pub fn try_on(
        &self,
        person: &ImageTensor,
        pose: &ImageTensor,
        garment: &ImageTensor,
        cfg: &SamplerConfig,
        seed: u64,
    ) -> Result<ImageTensor> {
        let req = TryOnRequest { person, pose, garment, seed };
        Ok(self.try_on_batch(&[req], cfg)?.remove(0))
    }

    /// Applies garments in order, feeding each result back as the source.
    pub fn multi_garment(
        &self,
        person: &ImageTensor,
        pose: &ImageTensor,
        garments: &[&ImageTensor],
        cfg: &SamplerConfig,
        seed: u64,
    ) -> Result<ImageTensor> {
        if garments.is_empty() {
            return Err(Error::Empty("garment list"));
        }
        let mut current = person.rgb();
        for g in garments {
            current = self.try_on(&current, pose, g, cfg, seed)?;
        }
        Ok(current)
    }
}

/// Re-expresses `ε̂` so that the implied `ẑ₀` lies in `[−1, 1]`.
fn clip_eps(z_t: &LatentTensor, eps: &LatentTensor, alpha_bar: f64) -> Result<LatentTensor> {
    let x0 = predict_x0(z_t, eps, alpha_bar)?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    if b == 0.0 {
        return Ok(eps.clone());
    }
    let data = z_t
        .data()
        .iter()
        .zip(x0.data())
        .map(|(z, x)| (z - a * x.clamp(-1.0, 1.0)) / b)
        .collect();
    let (c, h, w) = z_t.dims();
    LatentTensor::new(c, h, w, data)
}
