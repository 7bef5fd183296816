use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::tensor::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `out` to a scalar with fixed pseudo-random weights.
fn reduce(g: &mut Graph, out: Var) -> Var {
    let n = g.value(out).len();
    let w = Tensor::new(vec![n], (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect()).unwrap();
    g.weighted_sum(out, w, 1.0)
}

fn check_grads<F>(inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let o = f(&mut g, &vs);
        let o = reduce(&mut g, o);
        g.value(o).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let o = f(&mut g, &vars);
    let o = reduce(&mut g, o);
    let grads = g.backward(o);
    let h = 1e-6;
    for (i, t) in inputs.iter().enumerate() {
        let an = grads.get(vars[i]).expect("gradient for every leaf");
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = an.data()[j];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-5, "input {i} elem {j}: analytic {a} vs fd {fd}");
        }
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in [1, 3] {
        let x = random(&[2, 2, 4, 3], &mut rng);
        let w = random(&[3, 2, k, k], &mut rng);
        let b = random(&[3], &mut rng);
        check_grads(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], v[2]));
    }
}

#[test]
fn conv2d_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[1, 2, 3, 4], &mut rng);
    let w = random(&[2, 2, 3, 3], &mut rng);
    let b = random(&[2], &mut rng);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let out = g.conv2d(xv, wv, bv);
    let o = g.value(out);
    for co in 0..2 {
        for y in 0..3i32 {
            for xx in 0..4i32 {
                let mut acc = b.data()[co];
                for ci in 0..2 {
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let (sy, sx) = (y + ky - 1, xx + kx - 1);
                            if sy >= 0 && sy < 3 && sx >= 0 && sx < 4 {
                                acc += w.data()[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                    * x.data()[(ci * 3 + sy as usize) * 4 + sx as usize];
                            }
                        }
                    }
                }
                let got = o.data()[(co * 3 + y as usize) * 4 + xx as usize];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn pooling_and_resampling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check_grads(vec![random(&[2, 2, 4, 4], &mut rng)], |g, v| g.avg_pool(v[0], 2));
    check_grads(vec![random(&[1, 2, 2, 3], &mut rng)], |g, v| g.upsample(v[0], 2));
}

#[test]
fn elementwise_and_concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[2, 2, 2, 2], &mut rng);
    let b = random(&[2, 3, 2, 2], &mut rng);
    check_grads(vec![a.clone(), b], |g, v| {
        let c = g.concat_channels(v[0], v[1]);
        g.silu(c)
    });
    let c = random(&[2, 2, 2, 2], &mut rng);
    check_grads(vec![a.clone(), c], |g, v| g.add_scaled(v[0], v[1], -0.7));
    let s = random(&[2, 2], &mut rng);
    let t = random(&[2, 2], &mut rng);
    check_grads(vec![a, s, t], |g, v| g.film(v[0], v[1], v[2]));
    let p = random(&[2, 3, 4], &mut rng);
    let q = random(&[2, 1, 4], &mut rng);
    check_grads(vec![p, q], |g, v| g.concat_tokens(v[0], v[1]));
}

#[test]
fn linear_and_token_layout_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 3, 4], &mut rng);
    let w = random(&[4, 5], &mut rng);
    let b = random(&[5], &mut rng);
    check_grads(vec![x.clone(), w.clone(), b], |g, v| g.linear(v[0], v[1], Some(v[2])));
    check_grads(vec![x, w], |g, v| g.linear(v[0], v[1], None));
    let f = random(&[2, 3, 2, 2], &mut rng);
    check_grads(vec![f], |g, v| {
        let t = g.to_tokens(v[0]);
        let s = g.silu(t);
        g.from_tokens(s, 2, 2)
    });
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = random(&[2, 3, 4], &mut rng);
    let k = random(&[2, 5, 4], &mut rng);
    let v = random(&[2, 5, 4], &mut rng);
    check_grads(vec![q.clone(), k.clone(), v.clone()], |g, x| {
        let p = g.attn_probs(x[0], x[1], 2);
        g.attn_apply(p, x[2], 2)
    });
    check_grads(vec![q, k], |g, x| {
        let p = g.attn_probs(x[0], x[1], 2);
        g.head_mean(p)
    });
}

#[test]
fn attention_rows_are_stochastic_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = random(&[1, 4, 4], &mut rng);
    let k = random(&[1, 3, 4], &mut rng);
    let mut g = Graph::new();
    let (qv, kv) = (g.input(q), g.input(k));
    let p = g.attn_probs(qv, kv, 2);
    for row in g.value(p).data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn mse_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&[3, 2], &mut rng);
    let b = random(&[3, 2], &mut rng);
    check_grads(vec![a, b], |g, v| g.mse(v[0], v[1]));
}
