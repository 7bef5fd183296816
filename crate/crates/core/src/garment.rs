//! Frozen garment encoder: a strided convolutional stack that pools the
//! catalog image onto a `grid × grid` cell layout and projects every cell to a
//! token. Parameters come from a short self-reconstruction warm-up.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Bound, Graph, ParamStore, Var};
use crate::tensor::{ImageTensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GarmentEncoderConfig {
    pub resolution: usize,
    /// Token grid side; `l = grid²`.
    pub grid: usize,
    pub token_dim: usize,
    pub width: usize,
}

impl Default for GarmentEncoderConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            grid: 4,
            token_dim: 64,
            width: 16,
        }
    }
}

impl GarmentEncoderConfig {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    fn stages(&self) -> Result<usize> {
        let r = self.resolution;
        if self.grid == 0 || r % self.grid != 0 || !(r / self.grid).is_power_of_two() {
            return Err(Error::config(
                "garment_encoder.grid",
                format!("resolution {r} must be grid {} times a power of two", self.grid),
            ));
        }
        Ok((r / self.grid).trailing_zeros() as usize)
    }
}

/// `l × f` token matrix, rows in raster order over the pooling grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GarmentTokens {
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl GarmentTokens {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.tokens, self.dim], self.data.clone()).expect("token shape")
    }

    pub fn cosine_similarity(&self, other: &GarmentTokens) -> f64 {
        let dot: f64 = self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum();
        let na: f64 = self.data.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = other.data.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-300)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GarmentEncoder {
    config: GarmentEncoderConfig,
    params: ParamStore,
}

fn conv_param(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, gain: f64, rng: &mut ChaCha8Rng) {
    let std = gain / ((cin * k * k) as f64).sqrt();
    store.insert_normal(format!("{name}.w"), &[cout, cin, k, k], std, rng);
    store.insert_zeros(format!("{name}.b"), &[cout]);
}

fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
    g.conv2d(x, p.var(&format!("{name}.w")), p.var(&format!("{name}.b")))
}

impl GarmentEncoder {
    pub fn init(config: GarmentEncoderConfig, seed: u64) -> Result<Self> {
        let stages = config.stages()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut cin = 3;
        for s in 0..stages {
            conv_param(&mut params, &format!("enc{s}"), config.width, cin, 3, 1.0, &mut rng);
            cin = config.width;
        }
        conv_param(&mut params, "proj", config.token_dim, cin, 1, 1.0, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: GarmentEncoderConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config, 0)?;
        if reference.params.specs() != params.specs() {
            return Err(Error::config("garment_encoder", "parameter layout does not match config"));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &GarmentEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn hash(&self) -> String {
        self.params.hash()
    }

    /// Token grid as a feature map `[N, f, grid, grid]`.
    fn features(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let stages = self.config.stages().expect("validated at init");
        let mut h = x;
        for s in 0..stages {
            h = conv(g, p, &format!("enc{s}"), h);
            h = g.silu(h);
            h = g.avg_pool(h, 2);
        }
        conv(g, p, "proj", h)
    }

    fn batch_input(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        let r = self.config.resolution;
        let mut data = Vec::with_capacity(images.len() * 3 * r * r);
        for img in images {
            if !img.is_rgb() || img.height() != r || img.width() != r {
                return Err(Error::shape((3, r, r), (img.channels(), img.height(), img.width())));
            }
            data.extend_from_slice(img.data());
        }
        Tensor::new(vec![images.len(), 3, r, r], data)
    }

    pub fn encode(&self, img: &ImageTensor) -> Result<GarmentTokens> {
        Ok(self.encode_batch(&[img])?.remove(0))
    }

    /// Gradients never reach the encoder parameters from here.
    pub fn encode_batch(&self, images: &[&ImageTensor]) -> Result<Vec<GarmentTokens>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let input = self.batch_input(images)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.input(input);
        let f = self.features(&mut g, &p, x);
        let t = g.to_tokens(f);
        let (l, dim) = (self.config.tokens(), self.config.token_dim);
        Ok(g.value(t)
            .data()
            .chunks(l * dim)
            .map(|c| GarmentTokens {
                tokens: l,
                dim,
                data: c.to_vec(),
            })
            .collect())
    }
}

/// Disposable decoder used only while warming up the encoder.
struct ReconDecoder {
    params: ParamStore,
    stages: usize,
}

impl ReconDecoder {
    fn new(config: &GarmentEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let stages = config.stages()?;
        let mut params = ParamStore::new();
        conv_param(&mut params, "dec_in", config.width, config.token_dim, 1, 1.0, rng);
        for s in 0..stages {
            conv_param(&mut params, &format!("dec{s}"), config.width, config.width, 3, 1.0, rng);
        }
        conv_param(&mut params, "dec_out", 3, config.width, 3, 0.5, rng);
        Ok(Self { params, stages })
    }

    fn forward(&self, g: &mut Graph, p: &Bound, f: Var) -> Var {
        let mut h = conv(g, p, "dec_in", f);
        h = g.silu(h);
        for s in 0..self.stages {
            h = g.upsample(h, 2);
            h = conv(g, p, &format!("dec{s}"), h);
            h = g.silu(h);
        }
        conv(g, p, "dec_out", h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            lr: 2e-3,
            seed: 17,
        }
    }
}

/// Mean reconstruction error of `encoder` (with a decoder) over `images`.
fn recon_loss(
    encoder: &GarmentEncoder,
    decoder: &ReconDecoder,
    images: &[&ImageTensor],
    train: bool,
) -> Result<(f64, Option<(Vec<Tensor>, Vec<Tensor>)>)> {
    let input = encoder.batch_input(images)?;
    let mut g = Graph::new();
    let pe = encoder.params.bind(&mut g, train);
    let pd = decoder.params.bind(&mut g, train);
    let x = g.input(input);
    let f = encoder.features(&mut g, &pe, x);
    let y = decoder.forward(&mut g, &pd, f);
    let loss = g.mse(y, x);
    let value = g.value(loss).item();
    if !train {
        return Ok((value, None));
    }
    let mut grads = g.backward(loss);
    let ge = pe.collect(&mut grads);
    let gd = pd.collect(&mut grads);
    Ok((value, Some((ge, gd))))
}

/// Trains the encoder by self-reconstruction through a throwaway decoder.
///
/// `steps == 0` returns `init` unchanged.
pub fn pretrain_warmup(init: &GarmentEncoder, dataset: &[ImageTensor], warmup: &WarmupConfig) -> Result<GarmentEncoder> {
    Ok(pretrain_warmup_report(init, dataset, &[], warmup)?.0)
}

/// Held-out reconstruction MSE of the encoder/decoder pair at initialization
/// and after warm-up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WarmupReport {
    pub held_out_before: f64,
    pub held_out_after: f64,
}

/// [`pretrain_warmup`] that also scores `held_out` with the untrained and the
/// trained pair. Scores are NaN when `held_out` is empty.
pub fn pretrain_warmup_report(
    init: &GarmentEncoder,
    dataset: &[ImageTensor],
    held_out: &[ImageTensor],
    warmup: &WarmupConfig,
) -> Result<(GarmentEncoder, WarmupReport)> {
    if dataset.is_empty() {
        return Err(Error::Empty("garment dataset"));
    }
    if dataset.iter().all(|g| g == &dataset[0]) {
        return Err(Error::InvalidArgument("warm-up needs at least two distinct garments".into()));
    }
    let mut encoder = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(warmup.seed);
    let mut decoder = ReconDecoder::new(&encoder.config, &mut rng)?;
    let held: Vec<&ImageTensor> = held_out.iter().collect();
    let score = |e: &GarmentEncoder, d: &ReconDecoder| -> Result<f64> {
        if held.is_empty() {
            Ok(f64::NAN)
        } else {
            Ok(recon_loss(e, d, &held, false)?.0)
        }
    };
    let held_out_before = score(&encoder, &decoder)?;
    if warmup.steps == 0 {
        let report = WarmupReport { held_out_before, held_out_after: held_out_before };
        return Ok((encoder, report));
    }
    let adam = AdamConfig {
        lr: warmup.lr,
        ..AdamConfig::default()
    };
    let mut opt_e = Adam::new(adam, &encoder.params);
    let mut opt_d = Adam::new(adam, &decoder.params);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let batch = warmup.batch.clamp(1, dataset.len());
    for _ in 0..warmup.steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| &dataset[i]).collect();
        let (_, grads) = recon_loss(&encoder, &decoder, &imgs, true)?;
        let (ge, gd) = grads.expect("training pass returns gradients");
        opt_e.step(&mut encoder.params, &ge);
        opt_d.step(&mut decoder.params, &gd);
    }
    let held_out_after = score(&encoder, &decoder)?;
    Ok((encoder, WarmupReport { held_out_before, held_out_after }))
}
