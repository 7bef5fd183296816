//! Denoising MSE, the attention localization penalty, mask resizing, and the
//! weighted total objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};
use crate::tensor::{LatentTensor, Tensor};
use crate::unet::AttentionRecord;

/// Binary map: `true` marks the try-on area.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TryOnMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl TryOnMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    /// From a `{0, 1}` valued plane; anything else is rejected.
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let data = values
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(false)
                } else if v == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::InvalidArgument(format!("mask value {v} is not binary")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn fraction(&self) -> f64 {
        self.area() as f64 / self.data.len() as f64
    }

    pub fn complement(&self) -> TryOnMask {
        TryOnMask {
            data: self.data.iter().map(|v| !v).collect(),
            ..*self
        }
    }

    /// Pointwise `self ≤ other`.
    pub fn is_subset_of(&self, other: &TryOnMask) -> bool {
        self.data.len() == other.data.len() && self.data.iter().zip(&other.data).all(|(a, b)| !a || *b)
    }

    pub fn to_values(&self) -> Vec<f64> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}

/// Area-average pooling to `(h, w)` followed by a strict-majority threshold.
pub fn resize_mask(mask: &TryOnMask, h: usize, w: usize) -> Result<TryOnMask> {
    if h == 0 || w == 0 || h > mask.height || w > mask.width || mask.height % h != 0 || mask.width % w != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize {}x{} mask to {h}x{w} by an integer factor",
            mask.height, mask.width
        )));
    }
    let (fy, fx) = (mask.height / h, mask.width / w);
    let cell = (fy * fx) as f64;
    let mut out = TryOnMask::filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let mut count = 0usize;
            for dy in 0..fy {
                for dx in 0..fx {
                    count += mask.get(y * fy + dy, x * fx + dx) as usize;
                }
            }
            out.set(y, x, count as f64 / cell > 0.5);
        }
    }
    Ok(out)
}

/// Mean squared error over all elements.
pub fn ldm_loss(eps: &LatentTensor, eps_hat: &LatentTensor) -> Result<f64> {
    if eps.dims() != eps_hat.dims() {
        return Err(Error::shape(eps.dims(), eps_hat.dims()));
    }
    let n = eps.len() as f64;
    Ok(eps.data().iter().zip(eps_hat.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

/// `(1/n) Σ_k mean_pixels(A_k ⊙ (1 − M))` per block, averaged over blocks.
///
/// `n` is the number of garment tokens; in joint-key attention the remaining
/// columns belong to person tokens and are not penalized.
pub fn localization_loss(rec: &AttentionRecord, mask: &TryOnMask) -> Result<f64> {
    if rec.entries.is_empty() {
        return Err(Error::Empty("attention record"));
    }
    let mut total = 0.0;
    for e in &rec.entries {
        let m = resize_mask(mask, e.height, e.width)?;
        let pixels = e.height * e.width;
        let mut acc = 0.0;
        for (p, row) in e.scores.chunks(e.keys).enumerate() {
            if !m.data[p] {
                acc += row[..e.tokens].iter().sum::<f64>();
            }
        }
        total += acc / (e.tokens * pixels) as f64;
    }
    Ok(total / rec.entries.len() as f64)
}

/// Graph form of [`localization_loss`] over a batch.
///
/// `probs` holds one head-averaged `[N, h·w, keys]` variable per block and
/// `masks` the per-sample full-resolution masks.
pub(crate) fn localization_loss_graph(
    g: &mut Graph,
    probs: &[(usize, usize, Var)],
    tokens: usize,
    masks: &[&TryOnMask],
) -> Result<Var> {
    if probs.is_empty() {
        return Err(Error::Empty("attention record"));
    }
    let mut sum: Option<Var> = None;
    for &(h, w, var) in probs {
        let shape = g.shape(var).to_vec();
        let (n, pixels, keys) = (shape[0], shape[1], shape[2]);
        let mut weights = vec![0.0; n * pixels * keys];
        for (b, mask) in masks.iter().enumerate() {
            let m = resize_mask(mask, h, w)?;
            for p in 0..pixels {
                if !m.data[p] {
                    let row = (b * pixels + p) * keys;
                    weights[row..row + tokens].fill(1.0);
                }
            }
        }
        let scale = 1.0 / (tokens * pixels * n * probs.len()) as f64;
        let weights = Tensor::new(vec![n, pixels, keys], weights)?;
        let term = g.weighted_sum(var, weights, scale);
        sum = Some(match sum {
            None => term,
            Some(s) => g.add(s, term),
        });
    }
    Ok(sum.expect("non-empty"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ldm: f64,
    pub ar: f64,
    pub total: f64,
    pub lambda_ar: f64,
}

pub fn total_loss(ldm: f64, ar: f64, lambda_ar: f64) -> LossBreakdown {
    LossBreakdown {
        ldm,
        ar,
        total: ldm + lambda_ar * ar,
        lambda_ar,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::AttentionEntry;

    fn record(h: usize, w: usize, n: usize, scores: Vec<f64>) -> AttentionRecord {
        AttentionRecord {
            entries: vec![AttentionEntry {
                block: "b0".into(),
                height: h,
                width: w,
                tokens: n,
                keys: n,
                scores,
            }],
        }
    }

    #[test]
    fn ldm_loss_cases() {
        let eps = LatentTensor::zeros(1, 2, 2);
        assert_eq!(ldm_loss(&eps, &eps).unwrap(), 0.0);
        let ones = LatentTensor::new(1, 2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(ldm_loss(&eps, &ones).unwrap(), 1.0);
        assert!(ldm_loss(&eps, &LatentTensor::zeros(1, 2, 3)).is_err());
    }

    #[test]
    fn ldm_loss_matches_loop_oracle() {
        let a: Vec<f64> = (0..18).map(|i| ((i * 37 % 17) as f64 / 17.0) - 0.5).collect();
        let b: Vec<f64> = (0..18).map(|i| ((i * 11 % 13) as f64 / 13.0) - 0.3).collect();
        let ea = LatentTensor::new(2, 3, 3, a.clone()).unwrap();
        let eb = LatentTensor::new(2, 3, 3, b.clone()).unwrap();
        let mut oracle = 0.0;
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let i = (c * 3 + y) * 3 + x;
                    oracle += (a[i] - b[i]) * (a[i] - b[i]);
                }
            }
        }
        oracle /= 18.0;
        assert!((ldm_loss(&ea, &eb).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn resize_cases() {
        let ones = TryOnMask::filled(8, 8, true);
        for s in [1, 2, 4, 8] {
            assert_eq!(resize_mask(&ones, s, s).unwrap(), TryOnMask::filled(s, s, true));
            assert_eq!(
                resize_mask(&TryOnMask::filled(8, 8, false), s, s).unwrap(),
                TryOnMask::filled(s, s, false)
            );
        }
        let mut q = TryOnMask::filled(4, 4, false);
        for y in 0..2 {
            for x in 2..4 {
                q.set(y, x, true);
            }
        }
        let r = resize_mask(&q, 2, 2).unwrap();
        assert_eq!(r.data(), &[false, true, false, false]);
        assert!(resize_mask(&q, 3, 3).is_err());
        assert!(resize_mask(&q, 8, 8).is_err());
    }

    #[test]
    fn localization_hand_case() {
        let rec = record(1, 2, 2, vec![0.25, 0.75, 0.6, 0.4]);
        let m = TryOnMask::new(1, 2, vec![true, false]).unwrap();
        assert!((localization_loss(&rec, &m).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn localization_mask_extremes() {
        let rec = record(1, 2, 2, vec![0.25, 0.75, 0.6, 0.4]);
        assert_eq!(localization_loss(&rec, &TryOnMask::filled(1, 2, true)).unwrap(), 0.0);
        let all = localization_loss(&rec, &TryOnMask::filled(1, 2, false)).unwrap();
        assert!((all - 0.5).abs() < 1e-15);
        assert!(localization_loss(&AttentionRecord::default(), &TryOnMask::filled(1, 2, true)).is_err());
    }

    #[test]
    fn total_loss_is_linear_in_weight() {
        let a = total_loss(0.2, 0.05, 1.0);
        assert!((a.total - 0.25).abs() < 1e-15);
        assert_eq!(total_loss(0.2, 0.05, 0.0).total, 0.2);
        let b = total_loss(0.2, 0.05, 2.0);
        assert!(((b.total - b.ldm) - 2.0 * (a.total - a.ldm)).abs() < 1e-15);
    }

    #[test]
    fn mask_values_must_be_binary() {
        assert!(TryOnMask::from_values(1, 2, &[0.0, 0.5]).is_err());
        let m = TryOnMask::from_values(1, 2, &[0.0, 1.0]).unwrap();
        assert_eq!(m.complement().data(), &[true, false]);
        assert!(TryOnMask::filled(1, 2, false).is_subset_of(&m));
        assert!(!m.is_subset_of(&TryOnMask::filled(1, 2, false)));
    }
}
