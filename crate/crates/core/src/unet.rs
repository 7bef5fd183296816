//! The denoiser: a two-level U-Net over the channel-stacked conditioning
//! `[z_t | E(D) | E(P′)]`, with garment tokens injected by cross-attention at
//! the two lowest resolutions. Head-averaged attention maps are returned in
//! an [`AttentionRecord`] for the localization loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::garment::GarmentTokens;
use crate::nn::{Bound, Graph, ParamStore, Var};
use crate::schedule::NoiseSchedule;
use crate::tensor::{LatentTensor, Tensor};

/// Fixed order of the stacked input planes.
pub const CHANNEL_LAYOUT: [&str; 3] = ["z_t", "pose", "source"];

/// Cross-attention blocks, in record order.
pub const ATTENTION_BLOCKS: [&str; 3] = ["down2.xattn", "mid.xattn", "up2.xattn"];

/// Which keys the garment cross-attention normalizes over.
///
/// `Garment` attends to garment tokens only, so every recorded row sums to one
/// over those tokens. `Joint` appends the block's own person tokens to the key
/// set; the recorded row then covers `[garment | person]` columns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKeys {
    #[default]
    Garment,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    pub time_dim: usize,
    pub heads: usize,
    pub attn_dim: usize,
    pub token_dim: usize,
    pub tokens: usize,
    pub self_attention: bool,
    pub attention_keys: AttentionKeys,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            base_width: 32,
            time_dim: 64,
            heads: 2,
            attn_dim: 64,
            token_dim: 64,
            tokens: 16,
            self_attention: true,
            attention_keys: AttentionKeys::Garment,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.attn_dim % self.heads != 0 {
            return Err(Error::config("unet.attn_dim", "must be divisible by heads"));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::config("unet.time_dim", "must be even"));
        }
        if self.base_width == 0 || self.latent_channels == 0 || self.tokens == 0 {
            return Err(Error::config("unet", "widths must be positive"));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        CHANNEL_LAYOUT.len() * self.latent_channels
    }
}

/// Sinusoidal embedding: `[sin(t·ω_i)…, cos(t·ω_i)…]`, `ω_i = 10000^(−i/(dim/2))`.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| 10000f64.powf(-(i as f64) / half as f64)).collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (t * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (t * w).cos()));
    Ok(out)
}

/// One cross-attention block's head-averaged score map.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionEntry {
    pub block: String,
    pub height: usize,
    pub width: usize,
    /// Number of garment tokens `n`; always the leading columns.
    pub tokens: usize,
    /// Row length (`n`, or `n + h·w` with joint keys).
    pub keys: usize,
    /// `(h·w) × keys`, row-major.
    pub scores: Vec<f64>,
}

impl AttentionEntry {
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.scores.chunks(self.keys)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionRecord {
    pub entries: Vec<AttentionEntry>,
}

impl AttentionRecord {
    /// Largest deviation of any row sum from one.
    pub fn max_row_error(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.rows().map(|r| (r.iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    pub fn entries_in_unit_interval(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.scores.iter().all(|v| (0.0..=1.0).contains(v)))
    }
}

/// `[z_t | E(D) | E(P′)]`, all at the same latent resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    z_t: LatentTensor,
    pose: LatentTensor,
    source: LatentTensor,
}

impl ConditioningBundle {
    pub fn new(z_t: LatentTensor, pose: LatentTensor, source: LatentTensor) -> Result<Self> {
        if z_t.dims() != pose.dims() || z_t.dims() != source.dims() {
            return Err(Error::shape(z_t.dims(), (pose.dims(), source.dims())));
        }
        Ok(Self { z_t, pose, source })
    }

    pub fn z_t(&self) -> &LatentTensor {
        &self.z_t
    }

    pub fn pose(&self) -> &LatentTensor {
        &self.pose
    }

    pub fn source(&self) -> &LatentTensor {
        &self.source
    }

    pub fn with_z_t(&self, z_t: LatentTensor) -> Result<Self> {
        Self::new(z_t, self.pose.clone(), self.source.clone())
    }

    pub fn stacked(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.z_t.len());
        out.extend_from_slice(self.z_t.data());
        out.extend_from_slice(self.pose.data());
        out.extend_from_slice(self.source.data());
        out
    }
}

/// Projection matrices of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    /// `f_p × d`
    pub w_q: Tensor,
    /// `f_c × d`
    pub w_k: Tensor,
    /// `f_c × d`
    pub w_v: Tensor,
    pub heads: usize,
}

/// `A = softmax(Q Kᵀ/√d_h)` and `p_attn = A V_c` for a single sample.
///
/// `p` is `(h·w) × f_p`. `A` is returned averaged over heads; `p_attn`
/// concatenates the heads.
pub fn cross_attention(p: &Tensor, c: &GarmentTokens, w: &AttentionWeights) -> Result<(Tensor, Tensor)> {
    let ps = p.shape();
    if ps.len() != 2 || w.w_q.shape()[0] != ps[1] {
        return Err(Error::shape(w.w_q.shape(), ps));
    }
    if w.w_k.shape()[0] != c.dim || w.w_v.shape()[0] != c.dim {
        return Err(Error::shape(c.dim, w.w_k.shape()));
    }
    let d = w.w_q.shape()[1];
    if w.w_k.shape()[1] != d || w.w_v.shape()[1] != d || w.heads == 0 || d % w.heads != 0 {
        return Err(Error::InvalidArgument("attention dims must agree and divide by heads".into()));
    }
    let mut g = Graph::new();
    let pv = g.input(p.clone().reshape(vec![1, ps[0], ps[1]])?);
    let cv = g.input(Tensor::new(vec![1, c.tokens, c.dim], c.data.clone())?);
    let (wq, wk, wv) = (g.input(w.w_q.clone()), g.input(w.w_k.clone()), g.input(w.w_v.clone()));
    let q = g.linear(pv, wq, None);
    let k = g.linear(cv, wk, None);
    let v = g.linear(cv, wv, None);
    let probs = g.attn_probs(q, k, w.heads);
    let mean = g.head_mean(probs);
    let out = g.attn_apply(probs, v, w.heads);
    let a = g.value(mean).clone().reshape(vec![ps[0], c.tokens])?;
    let o = g.value(out).clone().reshape(vec![ps[0], d])?;
    Ok((o, a))
}

pub(crate) struct ForwardOut {
    pub eps: Var,
    /// `(h, w, head-mean probs [N, h·w, keys])` per block in record order.
    pub attention: Vec<(usize, usize, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TryOnUNet {
    config: UNetConfig,
    params: ParamStore,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, gain: f64) {
        let std = gain / ((cin * k * k) as f64).sqrt();
        self.store.insert_normal(format!("{name}.w"), &[cout, cin, k, k], std, &mut self.rng);
        self.store.insert_zeros(format!("{name}.b"), &[cout]);
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool, gain: f64) {
        let std = gain / (fan_in as f64).sqrt();
        self.store.insert_normal(format!("{name}.w"), &[fan_in, fan_out], std, &mut self.rng);
        if bias {
            self.store.insert_zeros(format!("{name}.b"), &[fan_out]);
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, temb: usize) {
        self.conv(&format!("{name}.conv1"), cout, cin, 3, 1.0);
        self.linear(&format!("{name}.scale"), temb, cout, true, 0.1);
        self.linear(&format!("{name}.shift"), temb, cout, true, 0.1);
        self.conv(&format!("{name}.conv2"), cout, cout, 3, 0.5);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cout, cin, 1, 1.0);
        }
    }

    fn attention(&mut self, name: &str, width: usize, kv_dim: usize, d: usize, joint: bool) {
        self.linear(&format!("{name}.q"), width, d, false, 1.0);
        self.linear(&format!("{name}.k"), kv_dim, d, false, 1.0);
        self.linear(&format!("{name}.v"), kv_dim, d, false, 1.0);
        if joint {
            self.linear(&format!("{name}.ks"), width, d, false, 1.0);
            self.linear(&format!("{name}.vs"), width, d, false, 1.0);
        }
        self.linear(&format!("{name}.o"), d, width, true, 0.5);
    }
}

impl TryOnUNet {
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = config.base_width;
        let te = config.time_dim;
        let (d, f) = (config.attn_dim, config.token_dim);
        let joint = config.attention_keys == AttentionKeys::Joint;
        init.linear("time.fc1", te, te, true, 1.0);
        init.linear("time.fc2", te, te, true, 1.0);
        init.conv("conv_in", c, config.input_channels(), 3, 1.0);
        init.res_block("down1.res", c, c, te);
        init.res_block("down2.res", c, 2 * c, te);
        init.attention("down2.xattn", 2 * c, f, d, joint);
        init.res_block("mid.res", 2 * c, 2 * c, te);
        if config.self_attention {
            init.attention("mid.sattn", 2 * c, 2 * c, d, false);
        }
        init.attention("mid.xattn", 2 * c, f, d, joint);
        init.res_block("up2.res", 4 * c, 2 * c, te);
        init.attention("up2.xattn", 2 * c, f, d, joint);
        init.res_block("up1.res", 3 * c, c, te);
        init.conv("conv_out", config.latent_channels, c, 3, 0.1);
        Ok(Self { config, params })
    }

    pub fn from_params(config: UNetConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config, 0)?;
        if reference.params.specs() != params.specs() {
            return Err(Error::config("tryon_unet", "parameter layout does not match config"));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn res_block(&self, g: &mut Graph, p: &Bound, name: &str, x: Var, temb: Var) -> Var {
        let v = |s: &str| p.var(&format!("{name}.{s}"));
        let h = g.silu(x);
        let h = g.conv2d(h, v("conv1.w"), v("conv1.b"));
        let scale = g.linear(temb, v("scale.w"), Some(v("scale.b")));
        let shift = g.linear(temb, v("shift.w"), Some(v("shift.b")));
        let h = g.film(h, scale, shift);
        let h = g.silu(h);
        let h = g.conv2d(h, v("conv2.w"), v("conv2.b"));
        let cin = g.shape(x)[1];
        let cout = g.shape(h)[1];
        let skip = if cin != cout {
            g.conv2d(x, v("skip.w"), v("skip.b"))
        } else {
            x
        };
        g.add(h, skip)
    }

    /// Attention block with a residual connection. `context = None` attends
    /// over the block's own tokens.
    fn attention(&self, g: &mut Graph, p: &Bound, name: &str, x: Var, context: Option<Var>, joint: bool) -> (Var, Var) {
        let v = |s: &str| p.var(&format!("{name}.{s}"));
        let (h, w) = (g.shape(x)[2], g.shape(x)[3]);
        let t = g.to_tokens(x);
        let q = g.linear(t, v("q.w"), None);
        let src = context.unwrap_or(t);
        let mut k = g.linear(src, v("k.w"), None);
        let mut val = g.linear(src, v("v.w"), None);
        if joint {
            let ks = g.linear(t, v("ks.w"), None);
            let vs = g.linear(t, v("vs.w"), None);
            k = g.concat_tokens(k, ks);
            val = g.concat_tokens(val, vs);
        }
        let probs = g.attn_probs(q, k, self.config.heads);
        let mean = g.head_mean(probs);
        let o = g.attn_apply(probs, val, self.config.heads);
        let o = g.linear(o, v("o.w"), Some(v("o.b")));
        let o = g.from_tokens(o, h, w);
        (g.add(x, o), mean)
    }

    /// `x`: `[N, 3F, H, W]`, `temb`: `[N, time_dim]`, `tokens`: `[N, l, f]`.
    pub(crate) fn forward(&self, g: &mut Graph, p: &Bound, x: Var, temb: Var, tokens: Var) -> ForwardOut {
        let joint = self.config.attention_keys == AttentionKeys::Joint;
        let te = g.linear(temb, p.var("time.fc1.w"), Some(p.var("time.fc1.b")));
        let te = g.silu(te);
        let te = g.linear(te, p.var("time.fc2.w"), Some(p.var("time.fc2.b")));
        let te = g.silu(te);

        let mut attention = Vec::with_capacity(ATTENTION_BLOCKS.len());
        let mut record = |g: &Graph, x: Var, a: Var| {
            let s = g.shape(x);
            attention.push((s[2], s[3], a));
        };

        let h0 = g.conv2d(x, p.var("conv_in.w"), p.var("conv_in.b"));
        let s1 = self.res_block(g, p, "down1.res", h0, te);
        let d1 = g.avg_pool(s1, 2);
        let h2 = self.res_block(g, p, "down2.res", d1, te);
        let (s2, a) = self.attention(g, p, "down2.xattn", h2, Some(tokens), joint);
        record(g, s2, a);
        let d2 = g.avg_pool(s2, 2);
        let mut m = self.res_block(g, p, "mid.res", d2, te);
        if self.config.self_attention {
            m = self.attention(g, p, "mid.sattn", m, None, false).0;
        }
        let (m, a) = self.attention(g, p, "mid.xattn", m, Some(tokens), joint);
        record(g, m, a);
        let u2 = g.upsample(m, 2);
        let u2 = g.concat_channels(u2, s2);
        let u2 = self.res_block(g, p, "up2.res", u2, te);
        let (u2, a) = self.attention(g, p, "up2.xattn", u2, Some(tokens), joint);
        record(g, u2, a);
        let u1 = g.upsample(u2, 2);
        let u1 = g.concat_channels(u1, s1);
        let u1 = self.res_block(g, p, "up1.res", u1, te);
        let o = g.silu(u1);
        let eps = g.conv2d(o, p.var("conv_out.w"), p.var("conv_out.b"));
        ForwardOut { eps, attention }
    }

    pub(crate) fn inputs(
        &self,
        g: &mut Graph,
        bundles: &[&ConditioningBundle],
        ts: &[usize],
        tokens: &[&GarmentTokens],
        tokens_leaf: bool,
    ) -> Result<(Var, Var, Var)> {
        let n = bundles.len();
        if n == 0 || ts.len() != n || tokens.len() != n {
            return Err(Error::InvalidArgument("batch components must have equal, non-zero length".into()));
        }
        let (f, h, w) = bundles[0].z_t.dims();
        if f != self.config.latent_channels {
            return Err(Error::shape(self.config.latent_channels, f));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidArgument(format!("latent {h}x{w} must be divisible by 4")));
        }
        let mut x = Vec::with_capacity(n * 3 * f * h * w);
        let mut te = Vec::with_capacity(n * self.config.time_dim);
        let mut tk = Vec::with_capacity(n * self.config.tokens * self.config.token_dim);
        for ((b, &t), c) in bundles.iter().zip(ts).zip(tokens) {
            if b.z_t.dims() != (f, h, w) {
                return Err(Error::shape((f, h, w), b.z_t.dims()));
            }
            if c.tokens != self.config.tokens || c.dim != self.config.token_dim {
                return Err(Error::shape((self.config.tokens, self.config.token_dim), (c.tokens, c.dim)));
            }
            x.extend(b.stacked());
            te.extend(timestep_embedding(t as f64, self.config.time_dim)?);
            tk.extend_from_slice(&c.data);
        }
        let xv = g.input(Tensor::new(vec![n, 3 * f, h, w], x)?);
        let tv = g.input(Tensor::new(vec![n, self.config.time_dim], te)?);
        let tk = Tensor::new(vec![n, self.config.tokens, self.config.token_dim], tk)?;
        let kv = if tokens_leaf { g.leaf(tk) } else { g.input(tk) };
        Ok((xv, tv, kv))
    }

    pub(crate) fn record_from(&self, g: &Graph, attention: &[(usize, usize, Var)], sample: usize) -> AttentionRecord {
        let entries = attention
            .iter()
            .zip(ATTENTION_BLOCKS)
            .map(|(&(h, w, var), name)| {
                let s = g.shape(var);
                let per = s[1] * s[2];
                AttentionEntry {
                    block: name.to_string(),
                    height: h,
                    width: w,
                    tokens: self.config.tokens,
                    keys: s[2],
                    scores: g.value(var).data()[sample * per..(sample + 1) * per].to_vec(),
                }
            })
            .collect();
        AttentionRecord { entries }
    }

    /// `ε_θ(z_t, ζ, t, c)` with the captured cross-attention maps.
    pub fn predict_noise(
        &self,
        bundle: &ConditioningBundle,
        t: usize,
        tokens: &GarmentTokens,
        sched: &NoiseSchedule,
    ) -> Result<(LatentTensor, AttentionRecord)> {
        Ok(self.predict_noise_batch(&[bundle], &[t], &[tokens], sched)?.remove(0))
    }

    pub fn predict_noise_batch(
        &self,
        bundles: &[&ConditioningBundle],
        ts: &[usize],
        tokens: &[&GarmentTokens],
        sched: &NoiseSchedule,
    ) -> Result<Vec<(LatentTensor, AttentionRecord)>> {
        for &t in ts {
            sched.check_t(t)?;
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (x, te, tk) = self.inputs(&mut g, bundles, ts, tokens, false)?;
        let out = self.forward(&mut g, &p, x, te, tk);
        let (f, h, w) = bundles[0].z_t.dims();
        let per = f * h * w;
        let eps = g.value(out.eps).data();
        (0..bundles.len())
            .map(|i| {
                let z = LatentTensor::new(f, h, w, eps[i * per..(i + 1) * per].to_vec())?;
                Ok((z, self.record_from(&g, &out.attention, i)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;
    use rand::Rng;

    pub(crate) fn tiny_config() -> UNetConfig {
        UNetConfig {
            latent_channels: 3,
            base_width: 4,
            time_dim: 8,
            heads: 2,
            attn_dim: 8,
            token_dim: 6,
            tokens: 4,
            self_attention: true,
            attention_keys: AttentionKeys::Garment,
        }
    }

    fn random_latent(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LatentTensor {
        LatentTensor::new(3, h, w, (0..3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_tokens(rng: &mut ChaCha8Rng, l: usize, f: usize) -> GarmentTokens {
        GarmentTokens {
            tokens: l,
            dim: f,
            data: (0..l * f).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn timestep_embedding_cases() {
        let e0 = timestep_embedding(0.0, 8).unwrap();
        assert!(e0[..4].iter().all(|v| *v == 0.0));
        assert!(e0[4..].iter().all(|v| *v == 1.0));
        assert_eq!(timestep_embedding(5.0, 8).unwrap(), timestep_embedding(5.0, 8).unwrap());
        let e1 = timestep_embedding(1.0, 4).unwrap();
        let expect = [1f64.sin(), 0.01f64.sin(), 1f64.cos(), 0.01f64.cos()];
        for (a, b) in e1.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(timestep_embedding(1.0, 5).is_err());
    }

    fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn cross_attention_hand_case() {
        let l2 = std::f64::consts::LN_2 * 2f64.sqrt();
        let c = GarmentTokens { tokens: 2, dim: 2, data: vec![0.0, l2, l2, 0.0] };
        let w = AttentionWeights { w_q: eye(2), w_k: eye(2), w_v: eye(2), heads: 1 };
        let (_, a) = cross_attention(&eye(2), &c, &w).unwrap();
        let expect = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0];
        for (x, y) in a.data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_zero_query_and_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_tokens(&mut rng, 3, 2);
        let w = AttentionWeights {
            w_q: Tensor::zeros(&[2, 4]),
            w_k: Tensor::new(vec![2, 4], (0..8).map(|i| i as f64 * 0.3).collect()).unwrap(),
            w_v: eye(2).reshape(vec![2, 2]).unwrap(),
            heads: 2,
        };
        // w_v must be f×d; use a proper 2×4 value matrix.
        let w = AttentionWeights { w_v: w.w_k.clone(), ..w };
        let p = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.1, 0.0, 0.3]).unwrap();
        let (_, a) = cross_attention(&p, &c, &w).unwrap();
        assert!(a.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let c1 = random_tokens(&mut rng, 1, 2);
        let (o, a) = cross_attention(&p, &c1, &w).unwrap();
        assert!(a.data().iter().all(|v| *v == 1.0));
        let vrow: Vec<f64> = (0..4)
            .map(|j| (0..2).map(|i| c1.data[i] * w.w_v.data()[i * 4 + j]).sum())
            .collect();
        for row in o.data().chunks(4) {
            for (a, b) in row.iter().zip(&vrow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_dimension_errors() {
        let c = GarmentTokens { tokens: 2, dim: 2, data: vec![0.0; 4] };
        let w = AttentionWeights { w_q: eye(3), w_k: eye(2), w_v: eye(2), heads: 1 };
        assert!(cross_attention(&eye(2), &c, &w).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        // Adding the same key offset along the query direction shifts every
        // logit in a row by a constant.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let c = random_tokens(&mut rng, 3, 2);
        let mut shifted = c.clone();
        for k in 0..3 {
            shifted.data[k * 2] += 0.7;
        }
        let w = AttentionWeights { w_q: eye(2), w_k: eye(2), w_v: eye(2), heads: 1 };
        let (_, a) = cross_attention(&p, &c, &w).unwrap();
        let (_, b) = cross_attention(&p, &shifted, &w).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn predict_noise_is_pure_and_records_stochastic_rows() {
        let cfg = tiny_config();
        let net = TryOnUNet::init(cfg, 1).unwrap();
        let sched = ScheduleConfig::default().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = ConditioningBundle::new(
            random_latent(&mut rng, 8, 8),
            random_latent(&mut rng, 8, 8),
            random_latent(&mut rng, 8, 8),
        )
        .unwrap();
        let c = random_tokens(&mut rng, 4, 6);
        let (e1, r1) = net.predict_noise(&b, 10, &c, &sched).unwrap();
        let (e2, r2) = net.predict_noise(&b, 10, &c, &sched).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(r1, r2);
        assert_eq!(e1.dims(), (3, 8, 8));
        assert_eq!(r1.entries.len(), 3);
        let names: Vec<&str> = r1.entries.iter().map(|e| e.block.as_str()).collect();
        assert_eq!(names, ATTENTION_BLOCKS);
        assert_eq!((r1.entries[0].height, r1.entries[1].height, r1.entries[2].height), (4, 2, 4));
        assert!(r1.max_row_error() < 1e-12);
        assert!(r1.entries_in_unit_interval());
        assert!(net.predict_noise(&b, 0, &c, &sched).is_err());
        assert!(net.predict_noise(&b, 201, &c, &sched).is_err());
    }

    #[test]
    fn joint_keys_record_person_columns() {
        let cfg = UNetConfig { attention_keys: AttentionKeys::Joint, ..tiny_config() };
        let net = TryOnUNet::init(cfg, 1).unwrap();
        let sched = ScheduleConfig::default().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = ConditioningBundle::new(
            random_latent(&mut rng, 8, 8),
            random_latent(&mut rng, 8, 8),
            random_latent(&mut rng, 8, 8),
        )
        .unwrap();
        let c = random_tokens(&mut rng, 4, 6);
        let (_, rec) = net.predict_noise(&b, 3, &c, &sched).unwrap();
        for e in &rec.entries {
            assert_eq!(e.keys, e.tokens + e.height * e.width);
        }
        assert!(rec.max_row_error() < 1e-12);
    }

    #[test]
    fn source_channels_influence_prediction() {
        let net = TryOnUNet::init(tiny_config(), 5).unwrap();
        let sched = ScheduleConfig::default().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = random_latent(&mut rng, 8, 8);
        let d = random_latent(&mut rng, 8, 8);
        let s = random_latent(&mut rng, 8, 8);
        let c = random_tokens(&mut rng, 4, 6);
        let a = ConditioningBundle::new(z.clone(), d.clone(), s).unwrap();
        let b = ConditioningBundle::new(z, d, LatentTensor::zeros(3, 8, 8)).unwrap();
        let (ea, _) = net.predict_noise(&a, 50, &c, &sched).unwrap();
        let (eb, _) = net.predict_noise(&b, 50, &c, &sched).unwrap();
        assert!(ea.max_abs_diff(&eb) > 1e-6);
    }

    #[test]
    fn garment_token_jvp_matches_finite_differences() {
        let net = TryOnUNet::init(tiny_config(), 7).unwrap();
        let sched = ScheduleConfig::default().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = ConditioningBundle::new(
            random_latent(&mut rng, 8, 8),
            random_latent(&mut rng, 8, 8),
            random_latent(&mut rng, 8, 8),
        )
        .unwrap();
        let c = random_tokens(&mut rng, 4, 6);
        let dir: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..192).map(|_| rng.random_range(-1.0..1.0)).collect();

        // uᵀ J v through one reverse pass on the token leaf.
        let mut g = Graph::new();
        let p = net.params().bind(&mut g, false);
        let (x, te, tk) = net.inputs(&mut g, &[&b], &[40], &[&c], true).unwrap();
        let out = net.forward(&mut g, &p, x, te, tk);
        let proj = g.weighted_sum(out.eps, Tensor::new(vec![1, 3, 8, 8], u.clone()).unwrap(), 1.0);
        let grads = g.backward(proj);
        let gc = grads.get(tk).unwrap();
        let analytic: f64 = gc.data().iter().zip(&dir).map(|(a, b)| a * b).sum();

        let shifted = |s: f64| {
            let mut t = c.clone();
            for (v, d) in t.data.iter_mut().zip(&dir) {
                *v += s * d;
            }
            let (e, _) = net.predict_noise(&b, 40, &t, &sched).unwrap();
            e.data().iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-5;
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        assert!((analytic - fd).abs() / analytic.abs().max(1e-7) <= 1e-4, "{analytic} vs {fd}");

        let mut bumped = c.clone();
        bumped.data[5] += 1e-3;
        let (e0, _) = net.predict_noise(&b, 40, &c, &sched).unwrap();
        let (e1, _) = net.predict_noise(&b, 40, &bumped, &sched).unwrap();
        assert!(e0.max_abs_diff(&e1) > 0.0);
    }

    #[test]
    fn bundle_rejects_mismatched_planes() {
        assert!(ConditioningBundle::new(
            LatentTensor::zeros(3, 8, 8),
            LatentTensor::zeros(3, 4, 4),
            LatentTensor::zeros(3, 8, 8)
        )
        .is_err());
    }

    #[test]
    fn from_params_checks_layout() {
        let net = TryOnUNet::init(tiny_config(), 1).unwrap();
        let other = UNetConfig { base_width: 8, ..tiny_config() };
        assert!(TryOnUNet::from_params(other, net.params().clone()).is_err());
        assert!(TryOnUNet::from_params(tiny_config(), net.params().clone()).is_ok());
    }
}
