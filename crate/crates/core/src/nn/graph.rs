//! Reverse-mode differentiation over a recorded list of tensor operations.
//!
//! Layout conventions: feature maps are `[N, C, H, W]`, token sequences are
//! `[N, L, D]`, attention probabilities are `[N, heads, M, L]`.

use super::gemm::{gemm, MatMut, MatRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, k: usize },
    AvgPool { x: Var, f: usize },
    Upsample { x: Var, f: usize },
    ConcatChannels { a: Var, b: Var },
    ConcatTokens { a: Var, b: Var },
    Silu { x: Var },
    Add { a: Var, b: Var },
    AddScaled { a: Var, b: Var, alpha: f64 },
    Film { x: Var, scale: Var, shift: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    ToTokens { x: Var },
    FromTokens { x: Var },
    AttnProbs { q: Var, k: Var, heads: usize },
    AttnApply { p: Var, v: Var, heads: usize },
    HeadMean { p: Var },
    Mse { a: Var, b: Var },
    WeightedSum { x: Var, weights: Tensor, scale: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requested them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, o) in out.iter_mut().enumerate() {
                        let sx = xx as isize + dx;
                        *o = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            x[base + sx as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Same-padded stride-1 convolution with an odd square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], ci, "conv2d input channels");
        assert_eq!(self.shape(b), &[co], "conv2d bias");
        assert!(k % 2 == 1, "conv2d kernel must be odd");
        let hw = h * wd;
        let ckk = ci * k * k;
        let mut out = Tensor::zeros(&[n, co, h, wd]);
        let mut cols = vec![0.0; if k == 1 { 0 } else { ckk * hw }];
        {
            let xv = self.nodes[x.0].value.data();
            let wv = self.nodes[w.0].value.data();
            let bv = self.nodes[b.0].value.data();
            let od = out.data_mut();
            for s in 0..n {
                let xs_ = &xv[s * ci * hw..(s + 1) * ci * hw];
                let src = if k == 1 {
                    MatRef::dense(xs_, ci, hw)
                } else {
                    im2col(xs_, ci, h, wd, k, &mut cols);
                    MatRef::dense(&cols, ckk, hw)
                };
                let o = &mut od[s * co * hw..(s + 1) * co * hw];
                for c in 0..co {
                    o[c * hw..(c + 1) * hw].fill(bv[c]);
                }
                gemm(1.0, MatRef::dense(wv, co, ckk), src, 1.0, MatMut::dense(o, co, hw));
            }
        }
        let ng = self.ng(&[x, w, b]);
        self.push(out, Op::Conv2d { x, w, b, k }, ng)
    }

    pub fn avg_pool(&mut self, x: Var, f: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h % f == 0 && w % f == 0, "avg_pool factor must divide the resolution");
        let (oh, ow) = (h / f, w / f);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let inv = 1.0 / (f * f) as f64;
        {
            let xv = self.nodes[x.0].value.data();
            let od = out.data_mut();
            for p in 0..n * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..f {
                            let row = p * h * w + (y * f + dy) * w + xx * f;
                            acc += xv[row..row + f].iter().sum::<f64>();
                        }
                        od[p * oh * ow + y * ow + xx] = acc * inv;
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::AvgPool { x, f }, ng)
    }

    pub fn upsample(&mut self, x: Var, f: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * f, w * f);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        {
            let xv = self.nodes[x.0].value.data();
            let od = out.data_mut();
            for p in 0..n * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        od[p * oh * ow + y * ow + xx] = xv[p * h * w + (y / f) * w + xx / f];
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Upsample { x, f }, ng)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa[0] == sb[0] && sa[2..] == sb[2..], "concat_channels shapes");
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let hw = sa[2] * sa[3];
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for s in 0..n {
                data.extend_from_slice(&av[s * ca * hw..(s + 1) * ca * hw]);
                data.extend_from_slice(&bv[s * cb * hw..(s + 1) * cb * hw]);
            }
        }
        let out = Tensor::new(vec![n, ca + cb, sa[2], sa[3]], data).expect("concat shape");
        let ng = self.ng(&[a, b]);
        self.push(out, Op::ConcatChannels { a, b }, ng)
    }

    pub fn concat_tokens(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa[0] == sb[0] && sa[2] == sb[2], "concat_tokens shapes");
        let (n, la, lb, d) = (sa[0], sa[1], sb[1], sa[2]);
        let mut data = Vec::with_capacity(n * (la + lb) * d);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for s in 0..n {
                data.extend_from_slice(&av[s * la * d..(s + 1) * la * d]);
                data.extend_from_slice(&bv[s * lb * d..(s + 1) * lb * d]);
            }
        }
        let out = Tensor::new(vec![n, la + lb, d], data).expect("concat shape");
        let ng = self.ng(&[a, b]);
        self.push(out, Op::ConcatTokens { a, b }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| silu(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("silu shape");
        let ng = self.ng(&[x]);
        self.push(out, Op::Silu { x }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.add_scaled(a, b, 1.0)
    }

    /// `a + alpha * b` for equally shaped operands.
    pub fn add_scaled(&mut self, a: Var, b: Var, alpha: f64) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + alpha * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("add shape");
        let ng = self.ng(&[a, b]);
        let op = if alpha == 1.0 {
            Op::Add { a, b }
        } else {
            Op::AddScaled { a, b, alpha }
        };
        self.push(out, op, ng)
    }

    /// Per-channel affine modulation `x * (1 + scale) + shift`.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        assert_eq!(self.shape(scale), &[n, c], "film scale");
        assert_eq!(self.shape(shift), &[n, c], "film shift");
        let hw = s[2] * s[3];
        let mut out = self.value(x).clone();
        {
            let sc = self.value(scale).data();
            let sh = self.value(shift).data();
            for (p, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let (m, b) = (1.0 + sc[p], sh[p]);
                for v in chunk {
                    *v = *v * m + b;
                }
            }
        }
        let ng = self.ng(&[x, scale, shift]);
        self.push(out, Op::Film { x, scale, shift }, ng)
    }

    /// Right-multiplies the last axis of `x` by `w` (`[K, P]`) and adds `b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().expect("linear input rank");
        assert_eq!(ws[0], k, "linear inner dimension");
        let p = ws[1];
        let rows = self.value(x).len() / k;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = p;
        let mut out = Tensor::zeros(&out_shape);
        {
            let od = out.data_mut();
            if let Some(b) = b {
                assert_eq!(self.shape(b), &[p], "linear bias");
                let bv = self.value(b).data();
                for row in od.chunks_mut(p) {
                    row.copy_from_slice(bv);
                }
            }
            gemm(
                1.0,
                MatRef::dense(self.value(x).data(), rows, k),
                MatRef::dense(self.value(w).data(), k, p),
                1.0,
                MatMut::dense(od, rows, p),
            );
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    /// `[N, C, H, W]` → `[N, H·W, C]` with raster pixel order.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut out = Tensor::zeros(&[n, hw, c]);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    for p in 0..hw {
                        od[(b * hw + p) * c + ch] = xv[(b * c + ch) * hw + p];
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::ToTokens { x }, ng)
    }

    /// `[N, H·W, C]` → `[N, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (n, hw, c) = (s[0], s[1], s[2]);
        assert_eq!(hw, h * w, "from_tokens resolution");
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    for p in 0..hw {
                        od[(b * c + ch) * hw + p] = xv[(b * hw + p) * c + ch];
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::FromTokens { x }, ng)
    }

    /// Row-wise `softmax(Q_h K_hᵀ / √d_h)` for every head.
    pub fn attn_probs(&mut self, q: Var, k: Var, heads: usize) -> Var {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let (n, m, d) = (qs[0], qs[1], qs[2]);
        let l = ks[1];
        assert!(ks[0] == n && ks[2] == d, "attn_probs shapes");
        assert!(d % heads == 0, "attention dim must be divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(&[n, heads, m, l]);
        {
            let qv = self.value(q).data();
            let kv = self.value(k).data();
            let od = out.data_mut();
            for b in 0..n {
                for h in 0..heads {
                    let off = ((b * heads + h) * m) * l;
                    let qh = MatRef::strided(qv, b * m * d + h * dh, m, dh, d);
                    let kh = MatRef::strided(kv, b * l * d + h * dh, l, dh, d);
                    gemm(scale, qh, kh.t(), 0.0, MatMut::strided(od, off, m, l, l));
                }
            }
            softmax_rows(od, l);
        }
        let ng = self.ng(&[q, k]);
        self.push(out, Op::AttnProbs { q, k, heads }, ng)
    }

    /// Weighted value sum per head, heads concatenated along the feature axis.
    pub fn attn_apply(&mut self, p: Var, v: Var, heads: usize) -> Var {
        let ps = self.shape(p).to_vec();
        let vs = self.shape(v).to_vec();
        let (n, m, l) = (ps[0], ps[2], ps[3]);
        assert_eq!(ps[1], heads, "attn_apply heads");
        assert!(vs[0] == n && vs[1] == l, "attn_apply shapes");
        let d = vs[2];
        let dh = d / heads;
        let mut out = Tensor::zeros(&[n, m, d]);
        {
            let pv = self.value(p).data();
            let vv = self.value(v).data();
            let od = out.data_mut();
            for b in 0..n {
                for h in 0..heads {
                    let ph = MatRef::strided(pv, ((b * heads + h) * m) * l, m, l, l);
                    let vh = MatRef::strided(vv, b * l * d + h * dh, l, dh, d);
                    gemm(1.0, ph, vh, 0.0, MatMut::strided(od, b * m * d + h * dh, m, dh, d));
                }
            }
        }
        let ng = self.ng(&[p, v]);
        self.push(out, Op::AttnApply { p, v, heads }, ng)
    }

    /// Arithmetic mean of attention probabilities over heads: `[N, M, L]`.
    pub fn head_mean(&mut self, p: Var) -> Var {
        let s = self.shape(p).to_vec();
        let (n, heads, ml) = (s[0], s[1], s[2] * s[3]);
        let mut out = Tensor::zeros(&[n, s[2], s[3]]);
        {
            let pv = self.value(p).data();
            let od = out.data_mut();
            let inv = 1.0 / heads as f64;
            for b in 0..n {
                for h in 0..heads {
                    let src = &pv[(b * heads + h) * ml..(b * heads + h + 1) * ml];
                    for (o, v) in od[b * ml..(b + 1) * ml].iter_mut().zip(src) {
                        *o += v * inv;
                    }
                }
            }
        }
        let ng = self.ng(&[p]);
        self.push(out, Op::HeadMean { p }, ng)
    }

    /// Mean squared difference, as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shapes");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let sum: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(sum / av.len() as f64);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mse { a, b }, ng)
    }

    /// `scale * Σ x ⊙ weights`, as a one-element tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor, scale: f64) -> Var {
        assert_eq!(self.value(x).len(), weights.len(), "weighted_sum shapes");
        let sum: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, w)| a * w)
            .sum();
        let out = Tensor::scalar(sum * scale);
        let ng = self.ng(&[x]);
        self.push(out, Op::WeightedSum { x, weights, scale }, ng)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let lv = &self.nodes[loss.0].value;
        assert_eq!(lv.len(), 1, "backward needs a scalar loss");
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, k } => {
                let (x, w, b, k) = (*x, *w, *b, *k);
                let xs = self.shape(x);
                let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let co = self.shape(w)[0];
                let hw = h * wd;
                let ckk = ci * k * k;
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let mut cols = vec![0.0; ckk * hw];
                let mut dcols = vec![0.0; ckk * hw];
                for s in 0..n {
                    let gs = MatRef::dense(&gd[s * co * hw..(s + 1) * co * hw], co, hw);
                    let xs_ = &xv[s * ci * hw..(s + 1) * ci * hw];
                    if let Some(db) = self.acc(grads, b) {
                        for c in 0..co {
                            db[c] += gd[(s * co + c) * hw..(s * co + c + 1) * hw].iter().sum::<f64>();
                        }
                    }
                    if let Some(dw) = self.acc(grads, w) {
                        let src = if k == 1 {
                            MatRef::dense(xs_, ci, hw)
                        } else {
                            im2col(xs_, ci, h, wd, k, &mut cols);
                            MatRef::dense(&cols, ckk, hw)
                        };
                        gemm(1.0, gs, src.t(), 1.0, MatMut::dense(dw, co, ckk));
                    }
                    if let Some(dx) = self.acc(grads, x) {
                        let dxs = &mut dx[s * ci * hw..(s + 1) * ci * hw];
                        if k == 1 {
                            gemm(1.0, MatRef::dense(wv, co, ckk).t(), gs, 1.0, MatMut::dense(dxs, ci, hw));
                        } else {
                            gemm(1.0, MatRef::dense(wv, co, ckk).t(), gs, 0.0, MatMut::dense(&mut dcols, ckk, hw));
                            col2im(&dcols, ci, h, wd, k, dxs);
                        }
                    }
                }
            }
            Op::AvgPool { x, f } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / f, w / f);
                let inv = 1.0 / (f * f) as f64;
                if let Some(dx) = self.acc(grads, *x) {
                    for p in 0..s[0] * s[1] {
                        for y in 0..h {
                            for xx in 0..w {
                                dx[p * h * w + y * w + xx] += gd[p * oh * ow + (y / f) * ow + xx / f] * inv;
                            }
                        }
                    }
                }
            }
            Op::Upsample { x, f } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h * f, w * f);
                if let Some(dx) = self.acc(grads, *x) {
                    for p in 0..s[0] * s[1] {
                        for y in 0..oh {
                            for xx in 0..ow {
                                dx[p * h * w + (y / f) * w + xx / f] += gd[p * oh * ow + y * ow + xx];
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let sa = self.shape(*a);
                let (n, ca, hw) = (sa[0], sa[1], sa[2] * sa[3]);
                let cb = self.shape(*b)[1];
                let ct = ca + cb;
                if let Some(da) = self.acc(grads, *a) {
                    for s in 0..n {
                        for (d, g) in da[s * ca * hw..(s + 1) * ca * hw]
                            .iter_mut()
                            .zip(&gd[s * ct * hw..(s * ct + ca) * hw])
                        {
                            *d += g;
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for s in 0..n {
                        for (d, g) in db[s * cb * hw..(s + 1) * cb * hw]
                            .iter_mut()
                            .zip(&gd[(s * ct + ca) * hw..(s + 1) * ct * hw])
                        {
                            *d += g;
                        }
                    }
                }
            }
            Op::ConcatTokens { a, b } => {
                let sa = self.shape(*a);
                let (n, la, d) = (sa[0], sa[1], sa[2]);
                let lb = self.shape(*b)[1];
                let lt = la + lb;
                if let Some(da) = self.acc(grads, *a) {
                    for s in 0..n {
                        for (o, g) in da[s * la * d..(s + 1) * la * d]
                            .iter_mut()
                            .zip(&gd[s * lt * d..(s * lt + la) * d])
                        {
                            *o += g;
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for s in 0..n {
                        for (o, g) in db[s * lb * d..(s + 1) * lb * d]
                            .iter_mut()
                            .zip(&gd[(s * lt + la) * d..(s + 1) * lt * d])
                        {
                            *o += g;
                        }
                    }
                }
            }
            Op::Silu { x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &v), g) in dx.iter_mut().zip(xv).zip(gd) {
                        let s = sigmoid(v);
                        *d += g * s * (1.0 + v * (1.0 - s));
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        for (o, g) in d.iter_mut().zip(gd) {
                            *o += g;
                        }
                    }
                }
            }
            Op::AddScaled { a, b, alpha } => {
                if let Some(d) = self.acc(grads, *a) {
                    for (o, g) in d.iter_mut().zip(gd) {
                        *o += g;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for (o, g) in d.iter_mut().zip(gd) {
                        *o += alpha * g;
                    }
                }
            }
            Op::Film { x, scale, shift } => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let xv = self.value(*x).data();
                let sc = self.value(*scale).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for (p, (d, g)) in dx.chunks_mut(hw).zip(gd.chunks(hw)).enumerate() {
                        let m = 1.0 + sc[p];
                        for (o, gv) in d.iter_mut().zip(g) {
                            *o += gv * m;
                        }
                    }
                }
                if let Some(ds) = self.acc(grads, *scale) {
                    for (p, (xc, g)) in xv.chunks(hw).zip(gd.chunks(hw)).enumerate() {
                        ds[p] += xc.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(db) = self.acc(grads, *shift) {
                    for (p, g) in gd.chunks(hw).enumerate() {
                        db[p] += g.iter().sum::<f64>();
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (k, p) = (ws[0], ws[1]);
                let rows = out.len() / p;
                let gm = MatRef::dense(gd, rows, p);
                if let Some(dw) = self.acc(grads, *w) {
                    let xm = MatRef::dense(self.value(*x).data(), rows, k);
                    gemm(1.0, xm.t(), gm, 1.0, MatMut::dense(dw, k, p));
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for row in gd.chunks(p) {
                            for (o, g) in db.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let wm = MatRef::dense(self.value(*w).data(), k, p);
                    gemm(1.0, gm, wm.t(), 1.0, MatMut::dense(dx, rows, k));
                }
            }
            Op::ToTokens { x } => {
                let s = self.shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                if let Some(dx) = self.acc(grads, *x) {
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                dx[(b * c + ch) * hw + p] += gd[(b * hw + p) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::FromTokens { x } => {
                let s = self.shape(*x);
                let (n, hw, c) = (s[0], s[1], s[2]);
                if let Some(dx) = self.acc(grads, *x) {
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                dx[(b * hw + p) * c + ch] += gd[(b * c + ch) * hw + p];
                            }
                        }
                    }
                }
            }
            Op::AttnProbs { q, k, heads } => {
                let (q, k, heads) = (*q, *k, *heads);
                let qs = self.shape(q);
                let (n, m, d) = (qs[0], qs[1], qs[2]);
                let l = self.shape(k)[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let pv = out.data();
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                let mut ds = vec![0.0; pv.len()];
                for ((drow, prow), grow) in ds.chunks_mut(l).zip(pv.chunks(l)).zip(gd.chunks(l)) {
                    let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((o, p), g) in drow.iter_mut().zip(prow).zip(grow) {
                        *o = p * (g - dot);
                    }
                }
                if let Some(dq) = self.acc(grads, q) {
                    let kv = self.value(k).data();
                    for b in 0..n {
                        for h in 0..heads {
                            let dsh = MatRef::strided(&ds, ((b * heads + h) * m) * l, m, l, l);
                            let kh = MatRef::strided(kv, b * l * d + h * dh, l, dh, d);
                            gemm(scale, dsh, kh, 1.0, MatMut::strided(dq, b * m * d + h * dh, m, dh, d));
                        }
                    }
                }
                if let Some(dk) = self.acc(grads, k) {
                    let qv = self.value(q).data();
                    for b in 0..n {
                        for h in 0..heads {
                            let dsh = MatRef::strided(&ds, ((b * heads + h) * m) * l, m, l, l);
                            let qh = MatRef::strided(qv, b * m * d + h * dh, m, dh, d);
                            gemm(scale, dsh.t(), qh, 1.0, MatMut::strided(dk, b * l * d + h * dh, l, dh, d));
                        }
                    }
                }
            }
            Op::AttnApply { p, v, heads } => {
                let (p, v, heads) = (*p, *v, *heads);
                let ps = self.shape(p);
                let (n, m, l) = (ps[0], ps[2], ps[3]);
                let d = self.shape(v)[2];
                let dh = d / heads;
                if let Some(dp) = self.acc(grads, p) {
                    let vv = self.value(v).data();
                    for b in 0..n {
                        for h in 0..heads {
                            let gh = MatRef::strided(gd, b * m * d + h * dh, m, dh, d);
                            let vh = MatRef::strided(vv, b * l * d + h * dh, l, dh, d);
                            gemm(1.0, gh, vh.t(), 1.0, MatMut::strided(dp, ((b * heads + h) * m) * l, m, l, l));
                        }
                    }
                }
                if let Some(dv) = self.acc(grads, v) {
                    let pv = self.value(p).data();
                    for b in 0..n {
                        for h in 0..heads {
                            let ph = MatRef::strided(pv, ((b * heads + h) * m) * l, m, l, l);
                            let gh = MatRef::strided(gd, b * m * d + h * dh, m, dh, d);
                            gemm(1.0, ph.t(), gh, 1.0, MatMut::strided(dv, b * l * d + h * dh, l, dh, d));
                        }
                    }
                }
            }
            Op::HeadMean { p } => {
                let s = self.shape(*p);
                let (n, heads, ml) = (s[0], s[1], s[2] * s[3]);
                let inv = 1.0 / heads as f64;
                if let Some(dp) = self.acc(grads, *p) {
                    for b in 0..n {
                        for h in 0..heads {
                            let dst = &mut dp[(b * heads + h) * ml..(b * heads + h + 1) * ml];
                            for (o, g) in dst.iter_mut().zip(&gd[b * ml..(b + 1) * ml]) {
                                *o += g * inv;
                            }
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let c = 2.0 * gd[0] / av.len() as f64;
                if let Some(da) = self.acc(grads, *a) {
                    for ((o, x), y) in da.iter_mut().zip(av).zip(bv) {
                        *o += c * (x - y);
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((o, x), y) in db.iter_mut().zip(av).zip(bv) {
                        *o -= c * (x - y);
                    }
                }
            }
            Op::WeightedSum { x, weights, scale } => {
                let c = gd[0] * scale;
                if let Some(dx) = self.acc(grads, *x) {
                    for (o, w) in dx.iter_mut().zip(weights.data()) {
                        *o += c * w;
                    }
                }
            }
        }
    }
}
