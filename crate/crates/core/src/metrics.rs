//! FID and KID over features from a frozen random convolutional projector,
//! and masked region errors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TryOnMask;
use crate::nn::{Graph, ParamStore};
use crate::tensor::{ImageTensor, Tensor};

/// `m × q` features, row-major, tagged with the extractor that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    extractor: String,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, extractor: impl Into<String>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("features must be finite".into()));
        }
        Ok(Self {
            rows,
            cols,
            data,
            extractor: extractor.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn extractor(&self) -> &str {
        &self.extractor
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub seed: u64,
    pub resolution: usize,
    pub widths: [usize; 3],
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            resolution: 64,
            widths: [16, 32, 48],
        }
    }
}

/// Fixed-seed random conv stack: three 3×3 conv + SiLU + 2× pool stages,
/// then per-channel global means and standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    config: ExtractorConfig,
    params: ParamStore,
}

impl FeatureExtractor {
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        if config.resolution < 8 || config.resolution % 8 != 0 {
            return Err(Error::config("extractor.resolution", "must be a multiple of 8"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut cin = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            params.insert_normal(format!("conv{i}.w"), &[w, cin, 3, 3], std, &mut rng);
            params.insert_normal(format!("conv{i}.b"), &[w], 0.1, &mut rng);
            cin = w;
        }
        Ok(Self { config, params })
    }

    pub fn id(&self) -> String {
        let w = self.config.widths;
        format!("randconv-s{}-r{}-w{}x{}x{}", self.config.seed, self.config.resolution, w[0], w[1], w[2])
    }

    pub fn dims(&self) -> usize {
        2 * self.config.widths[2]
    }

    pub fn extract(&self, images: &[&ImageTensor]) -> Result<FeatureMatrix> {
        if images.is_empty() {
            return Err(Error::Empty("image list"));
        }
        let r = self.config.resolution;
        let mut rows = Vec::with_capacity(images.len() * self.dims());
        // Chunks bound the im2col buffers.
        for chunk in images.chunks(16) {
            let mut data = Vec::with_capacity(chunk.len() * 3 * r * r);
            for img in chunk {
                if img.height() != r || img.width() != r {
                    return Err(Error::shape((r, r), (img.height(), img.width())));
                }
                data.extend_from_slice(img.rgb().data());
            }
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let mut x = g.input(Tensor::new(vec![chunk.len(), 3, r, r], data)?);
            for i in 0..3 {
                x = g.conv2d(x, p.var(&format!("conv{i}.w")), p.var(&format!("conv{i}.b")));
                x = g.silu(x);
                x = g.avg_pool(x, 2);
            }
            let s = g.shape(x).to_vec();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let v = g.value(x).data();
            for b in 0..n {
                let mut means = Vec::with_capacity(c);
                let mut stds = Vec::with_capacity(c);
                for ch in 0..c {
                    let plane = &v[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    let mean = plane.iter().sum::<f64>() / hw as f64;
                    let var = plane.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / hw as f64;
                    means.push(mean);
                    stds.push(var.sqrt());
                }
                rows.extend(means);
                rows.extend(stds);
            }
        }
        FeatureMatrix::new(images.len(), self.dims(), rows, self.id())
    }
}

/// Diagonal jitter added to both covariances before the matrix square root.
pub const FID_JITTER: f64 = 1e-6;

/// Mean and `1/(m−1)` covariance.
pub fn feature_stats(x: &FeatureMatrix) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x.rows < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {}", x.rows)));
    }
    let m = x.matrix();
    let mu = m.row_mean().transpose();
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (x.rows - 1) as f64;
    Ok((mu, cov))
}

fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(a.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` with jittered covariances.
pub fn fid_from_stats(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    let q = mu1.len();
    if mu2.len() != q || cov1.shape() != (q, q) || cov2.shape() != (q, q) {
        return Err(Error::shape(q, (mu2.len(), cov1.shape(), cov2.shape())));
    }
    let eye = DMatrix::<f64>::identity(q, q) * FID_JITTER;
    let (c1, c2) = (cov1 + &eye, cov2 + &eye);
    // Tr((Σ₁Σ₂)^{1/2}) = Tr((S Σ₂ S)^{1/2}) with S = Σ₁^{1/2}; the inner
    // matrix is symmetric PSD, so its eigenvalues are real.
    let s = sym_sqrt(&c1);
    let mut inner = &s * &c2 * &s;
    inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (mu1 - mu2).norm_squared();
    Ok(diff + c1.trace() + c2.trace() - 2.0 * tr_sqrt)
}

pub fn fid(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.cols != y.cols {
        return Err(Error::shape(x.cols, y.cols));
    }
    let (m1, c1) = feature_stats(x)?;
    let (m2, c2) = feature_stats(y)?;
    fid_from_stats(&m1, &c1, &m2, &c2)
}

/// `k(x, y) = (γ xᵀy + c)^d`; `γ = None` means `1/q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyKernel {
    pub degree: u32,
    pub gamma: Option<f64>,
    pub coef: f64,
}

impl Default for PolyKernel {
    fn default() -> Self {
        Self {
            degree: 3,
            gamma: None,
            coef: 1.0,
        }
    }
}

impl PolyKernel {
    pub fn describe(&self, q: usize) -> String {
        format!("poly(degree={}, gamma={}, coef={})", self.degree, self.gamma_for(q), self.coef)
    }

    fn gamma_for(&self, q: usize) -> f64 {
        self.gamma.unwrap_or(1.0 / q as f64)
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        (self.gamma_for(a.len()) * dot + self.coef).powi(self.degree as i32)
    }

    fn gram(&self, x: &FeatureMatrix, y: &FeatureMatrix) -> DMatrix<f64> {
        let g = self.gamma_for(x.cols);
        let k = x.matrix() * y.matrix().transpose();
        k.map(|v| (g * v + self.coef).powi(self.degree as i32))
    }
}

/// KID multiplier applied to the MMD² estimate.
pub const KID_SCALE: f64 = 100.0;

fn mmd2_from_grams(kxx: &DMatrix<f64>, kyy: &DMatrix<f64>, kxy: &DMatrix<f64>) -> f64 {
    let off = |k: &DMatrix<f64>| {
        let n = k.nrows();
        (k.sum() - k.trace()) / (n * (n - 1)) as f64
    };
    off(kxx) + off(kyy) - 2.0 * kxy.mean()
}

/// Unbiased MMD² (diagonals excluded), times [`KID_SCALE`].
pub fn kid(x: &FeatureMatrix, y: &FeatureMatrix, kernel: &PolyKernel) -> Result<f64> {
    check_kid(x, y)?;
    let kxx = kernel.gram(x, x);
    let kyy = kernel.gram(y, y);
    let kxy = kernel.gram(x, y);
    Ok(KID_SCALE * mmd2_from_grams(&kxx, &kyy, &kxy))
}

fn check_kid(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<()> {
    if x.rows < 2 || y.rows < 2 {
        return Err(Error::InvalidArgument("KID needs at least 2 samples per side".into()));
    }
    if x.cols != y.cols {
        return Err(Error::shape(x.cols, y.cols));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KidEstimate {
    pub value: f64,
    pub std_error: f64,
    pub bootstrap_reps: usize,
}

/// KID with a bootstrap standard error. Each replicate resamples both sets
/// with replacement; within-set pairs that are copies of one sample are left
/// out so the replicate stays unbiased.
pub fn kid_with_error(x: &FeatureMatrix, y: &FeatureMatrix, kernel: &PolyKernel, reps: usize, seed: u64) -> Result<KidEstimate> {
    check_kid(x, y)?;
    if reps < 2 {
        return Err(Error::InvalidArgument("bootstrap needs at least 2 replicates".into()));
    }
    let kxx = kernel.gram(x, x);
    let kyy = kernel.gram(y, y);
    let kxy = kernel.gram(x, y);
    let value = KID_SCALE * mmd2_from_grams(&kxx, &kyy, &kxy);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let within = |k: &DMatrix<f64>, idx: &[usize]| {
        let (mut s, mut n) = (0.0, 0usize);
        for (i, &a) in idx.iter().enumerate() {
            for (j, &b) in idx.iter().enumerate() {
                if i != j && a != b {
                    s += k[(a, b)];
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let ix: Vec<usize> = (0..x.rows).map(|_| rng.random_range(0..x.rows)).collect();
        let iy: Vec<usize> = (0..y.rows).map(|_| rng.random_range(0..y.rows)).collect();
        let mut cross = 0.0;
        for &a in &ix {
            for &b in &iy {
                cross += kxy[(a, b)];
            }
        }
        cross /= (ix.len() * iy.len()) as f64;
        samples.push(KID_SCALE * (within(&kxx, &ix) + within(&kyy, &iy) - 2.0 * cross));
    }
    let mean = samples.iter().sum::<f64>() / reps as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    Ok(KidEstimate {
        value,
        std_error: var.sqrt(),
        bootstrap_reps: reps,
    })
}

/// Mean absolute RGB error over `mask` (`inside`) or its complement.
pub fn region_mae(a: &ImageTensor, b: &ImageTensor, mask: &TryOnMask, inside: bool) -> Result<f64> {
    if !a.same_size(b) || a.height() != mask.height() || a.width() != mask.width() {
        return Err(Error::shape((a.height(), a.width()), (b.height(), b.width(), mask.height(), mask.width())));
    }
    let (h, w) = (a.height(), a.width());
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == inside {
                for c in 0..3 {
                    sum += (a.get(c, y, x) - b.get(c, y, x)).abs();
                }
                n += 3;
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("mask region"));
    }
    Ok(sum / n as f64)
}

/// Mean absolute RGB error over pixels where `weight` is exactly one.
pub fn weighted_region_mae(a: &ImageTensor, b: &ImageTensor, weight: &[f64]) -> Result<Option<f64>> {
    if !a.same_size(b) || weight.len() != a.height() * a.width() {
        return Err(Error::shape(a.height() * a.width(), weight.len()));
    }
    let w = a.width();
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, &wt) in weight.iter().enumerate() {
        if wt == 1.0 {
            let (y, x) = (i / w, i % w);
            for c in 0..3 {
                sum += (a.get(c, y, x) - b.get(c, y, x)).abs();
            }
            n += 3;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, m: usize, q: usize, shift: f64) -> FeatureMatrix {
        let data = (0..m * q).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut *rng) + shift).collect::<Vec<f64>>();
        FeatureMatrix::new(m, q, data, "test").unwrap()
    }

    #[test]
    fn fid_identity_symmetry_and_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(&mut rng, 60, 5, 0.0);
        let y = gaussian(&mut rng, 50, 5, 0.4);
        assert!(fid(&x, &x).unwrap().abs() <= 1e-6);
        let (a, b) = (fid(&x, &y).unwrap(), fid(&y, &x).unwrap());
        assert!((a - b).abs() <= 1e-9);
        assert!(a > 0.0);
        // Random orthogonal matrix from a QR factorization.
        let r = DMatrix::from_fn(5, 5, |_, _| Distribution::<f64>::sample(&StandardNormal, &mut rng));
        let qm = r.qr().q();
        let rot = |f: &FeatureMatrix| {
            let m = DMatrix::from_row_slice(f.rows(), 5, f.data()) * &qm;
            FeatureMatrix::new(f.rows(), 5, m.transpose().as_slice().to_vec(), "rot").unwrap()
        };
        assert!((fid(&rot(&x), &rot(&y)).unwrap() - a).abs() <= 1e-6);
        assert!(fid(&FeatureMatrix::new(1, 5, vec![0.0; 5], "t").unwrap(), &x).is_err());
    }

    #[test]
    fn fid_one_dimensional_closed_form() {
        let v = fid_from_stats(
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_element(1, 2.0),
            &DMatrix::from_element(1, 1, 4.0),
        )
        .unwrap();
        assert!((v - 5.0).abs() < 1e-3, "{v}");
    }

    fn kid_loop(x: &FeatureMatrix, y: &FeatureMatrix, k: &PolyKernel) -> f64 {
        let (m, n) = (x.rows(), y.rows());
        let mut sxx = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    sxx += k.eval(x.row(i), x.row(j));
                }
            }
        }
        let mut syy = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    syy += k.eval(y.row(i), y.row(j));
                }
            }
        }
        let mut sxy = 0.0;
        for i in 0..m {
            for j in 0..n {
                sxy += k.eval(x.row(i), y.row(j));
            }
        }
        100.0 * (sxx / (m * (m - 1)) as f64 + syy / (n * (n - 1)) as f64 - 2.0 * sxy / (m * n) as f64)
    }

    #[test]
    fn kid_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(&mut rng, 17, 6, 0.0);
        let y = gaussian(&mut rng, 13, 6, 0.3);
        let k = PolyKernel::default();
        assert!((kid(&x, &y, &k).unwrap() - kid_loop(&x, &y, &k)).abs() < 1e-10);
        assert!(kid(&FeatureMatrix::new(1, 6, vec![0.0; 6], "t").unwrap(), &y, &k).is_err());
    }

    #[test]
    fn kid_degree_one_block_values() {
        let x = FeatureMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], "t").unwrap();
        let y = FeatureMatrix::new(2, 2, vec![-1.0, 0.0, 0.0, -1.0], "t").unwrap();
        let k = PolyKernel { degree: 1, gamma: None, coef: 1.0 };
        // Within-set off-diagonals are all 1; cross terms average 0.75.
        assert!((kid(&x, &y, &k).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn kid_same_distribution_within_bootstrap_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian(&mut rng, 500, 8, 0.0);
        let y = gaussian(&mut rng, 500, 8, 0.0);
        let est = kid_with_error(&x, &y, &PolyKernel::default(), 50, 4).unwrap();
        assert!(est.value.abs() <= 3.0 * est.std_error, "{est:?}");
    }

    #[test]
    fn kid_is_unbiased_under_the_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = PolyKernel::default();
        let vals: Vec<f64> = (0..200)
            .map(|_| kid(&gaussian(&mut rng, 30, 4, 0.0), &gaussian(&mut rng, 30, 4, 0.0), &k).unwrap())
            .collect();
        let mean = vals.iter().sum::<f64>() / 200.0;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 199.0).sqrt();
        assert!(mean.abs() <= 3.0 * sd / 200f64.sqrt(), "mean {mean}, sd {sd}");
    }

    #[test]
    fn region_mae_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = ImageTensor::new(3, 4, 5, (0..60).map(|_| rng.random::<f64>()).collect()).unwrap();
        let b = ImageTensor::new(3, 4, 5, (0..60).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mask = TryOnMask::new(4, 5, (0..20).map(|i| i % 3 == 0).collect()).unwrap();
        assert_eq!(region_mae(&a, &a, &mask, true).unwrap(), 0.0);
        let inv = ImageTensor::new(3, 4, 5, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let mut expect = 0.0;
        let mut n = 0;
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    if !mask.get(y, x) {
                        expect += (1.0 - 2.0 * a.get(c, y, x)).abs();
                        n += 1;
                    }
                }
            }
        }
        assert!((region_mae(&a, &inv, &mask, false).unwrap() - expect / n as f64).abs() < 1e-12);
        let (mut s, mut k) = (0.0, 0);
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    if mask.get(y, x) {
                        s += (a.get(c, y, x) - b.get(c, y, x)).abs();
                        k += 1;
                    }
                }
            }
        }
        assert!((region_mae(&a, &b, &mask, true).unwrap() - s / k as f64).abs() < 1e-12);
        assert!(region_mae(&a, &b, &TryOnMask::filled(4, 5, false), true).is_err());
    }

    #[test]
    fn extractor_is_deterministic_and_separates_families() {
        let ex = FeatureExtractor::new(ExtractorConfig { resolution: 16, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let stripes = |rng: &mut ChaCha8Rng| {
            let p = rng.random_range(2..4);
            let a: f64 = rng.random_range(0.0..0.3);
            let mut img = ImageTensor::filled(3, 16, 16, 0.0);
            for y in 0..16 {
                for x in 0..16 {
                    let v = if (x / p) % 2 == 0 { a } else { 1.0 - a };
                    for c in 0..3 {
                        img.set(c, y, x, v);
                    }
                }
            }
            img
        };
        let flat = |rng: &mut ChaCha8Rng| ImageTensor::filled(3, 16, 16, rng.random_range(0.3..0.7));
        let fam_a: Vec<ImageTensor> = (0..8).map(|_| stripes(&mut rng)).collect();
        let fam_b: Vec<ImageTensor> = (0..8).map(|_| flat(&mut rng)).collect();
        let refs_a: Vec<&ImageTensor> = fam_a.iter().collect();
        let refs_b: Vec<&ImageTensor> = fam_b.iter().collect();
        let fa = ex.extract(&refs_a).unwrap();
        assert_eq!(fa, ex.extract(&refs_a).unwrap());
        assert_eq!(fa.extractor(), ex.id());
        let rev: Vec<&ImageTensor> = refs_a.iter().rev().cloned().collect();
        let fr = ex.extract(&rev).unwrap();
        for i in 0..8 {
            assert_eq!(fa.row(i), fr.row(7 - i));
        }
        let fb = ex.extract(&refs_b).unwrap();
        let centroid = |f: &FeatureMatrix| -> Vec<f64> {
            (0..f.cols()).map(|j| (0..f.rows()).map(|i| f.row(i)[j]).sum::<f64>() / f.rows() as f64).collect()
        };
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let (ca, cb) = (centroid(&fa), centroid(&fb));
        let within = |f: &FeatureMatrix, c: &[f64]| (0..f.rows()).map(|i| dist(f.row(i), c)).sum::<f64>() / f.rows() as f64;
        let avg_within = (within(&fa, &ca) + within(&fb, &cb)) / 2.0;
        assert!(dist(&ca, &cb) > avg_within);
        assert!(ex.extract(&[&ImageTensor::filled(3, 8, 8, 0.0)]).is_err());
        assert!(ex.extract(&[]).is_err());
    }
}
