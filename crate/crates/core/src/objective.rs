//! The combined training objective `L_LDM + λ_ar · L_ar` over a batch, with
//! gradients for the denoiser parameters.

use crate::error::{Error, Result};
use crate::garment::GarmentTokens;
use crate::losses::{localization_loss_graph, total_loss, LossBreakdown, TryOnMask};
use crate::nn::Graph;
use crate::tensor::{LatentTensor, Tensor};
use crate::unet::{ConditioningBundle, TryOnUNet};

/// One noised training sample: `bundle.z_t()` was produced from `eps` at `t`.
#[derive(Clone, Debug)]
pub struct TrainingExample<'a> {
    pub bundle: ConditioningBundle,
    pub t: usize,
    pub eps: LatentTensor,
    pub tokens: &'a GarmentTokens,
    pub mask: &'a TryOnMask,
}

fn build(
    net: &TryOnUNet,
    examples: &[TrainingExample<'_>],
    lambda_ar: f64,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<Tensor>>)> {
    if examples.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    if !(lambda_ar >= 0.0 && lambda_ar.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda_ar must be finite and non-negative, got {lambda_ar}")));
    }
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, with_grads);
    let bundles: Vec<&ConditioningBundle> = examples.iter().map(|e| &e.bundle).collect();
    let ts: Vec<usize> = examples.iter().map(|e| e.t).collect();
    let tokens: Vec<&GarmentTokens> = examples.iter().map(|e| e.tokens).collect();
    let (x, te, tk) = net.inputs(&mut g, &bundles, &ts, &tokens, false)?;
    let out = net.forward(&mut g, &p, x, te, tk);

    let (f, h, w) = examples[0].bundle.z_t().dims();
    let mut target = Vec::with_capacity(examples.len() * f * h * w);
    for e in examples {
        if e.eps.dims() != (f, h, w) {
            return Err(Error::shape((f, h, w), e.eps.dims()));
        }
        target.extend_from_slice(e.eps.data());
    }
    let target = g.input(Tensor::new(vec![examples.len(), f, h, w], target)?);
    let ldm = g.mse(out.eps, target);
    let masks: Vec<&TryOnMask> = examples.iter().map(|e| e.mask).collect();
    let ar = localization_loss_graph(&mut g, &out.attention, net.config().tokens, &masks)?;
    let total = g.add_scaled(ldm, ar, lambda_ar);
    let breakdown = total_loss(g.value(ldm).item(), g.value(ar).item(), lambda_ar);
    if !with_grads {
        return Ok((breakdown, None));
    }
    let mut grads = g.backward(total);
    Ok((breakdown, Some(p.collect(&mut grads))))
}

/// Loss terms without gradients.
pub fn batch_loss(net: &TryOnUNet, examples: &[TrainingExample<'_>], lambda_ar: f64) -> Result<LossBreakdown> {
    Ok(build(net, examples, lambda_ar, false)?.0)
}

/// Loss terms and `∂total/∂θ`, one tensor per parameter in store order.
pub fn batch_loss_and_grads(
    net: &TryOnUNet,
    examples: &[TrainingExample<'_>],
    lambda_ar: f64,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let (b, g) = build(net, examples, lambda_ar, true)?;
    Ok((b, g.expect("gradients requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::localization_loss;
    use crate::schedule::ScheduleConfig;
    use crate::unet::{AttentionKeys, UNetConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(keys: AttentionKeys) -> UNetConfig {
        UNetConfig {
            latent_channels: 3,
            base_width: 4,
            time_dim: 8,
            heads: 2,
            attn_dim: 8,
            token_dim: 6,
            tokens: 4,
            self_attention: true,
            attention_keys: keys,
        }
    }

    struct Fixture {
        tokens: Vec<GarmentTokens>,
        masks: Vec<TryOnMask>,
        latents: Vec<[LatentTensor; 4]>,
        ts: Vec<usize>,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lat = |rng: &mut ChaCha8Rng| {
            LatentTensor::new(3, 8, 8, (0..192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let mut fx = Fixture { tokens: vec![], masks: vec![], latents: vec![], ts: vec![] };
        for i in 0..2 {
            fx.latents.push([lat(&mut rng), lat(&mut rng), lat(&mut rng), lat(&mut rng)]);
            fx.tokens.push(GarmentTokens {
                tokens: 4,
                dim: 6,
                data: (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
            });
            let mut m = TryOnMask::filled(8, 8, false);
            for y in 2..6 {
                for x in (1 + i)..(5 + i) {
                    m.set(y, x, true);
                }
            }
            fx.masks.push(m);
            fx.ts.push(17 + 60 * i);
        }
        fx
    }

    fn examples(fx: &Fixture) -> Vec<TrainingExample<'_>> {
        (0..fx.ts.len())
            .map(|i| {
                let [z, d, s, e] = fx.latents[i].clone();
                TrainingExample {
                    bundle: ConditioningBundle::new(z, d, s).unwrap(),
                    t: fx.ts[i],
                    eps: e,
                    tokens: &fx.tokens[i],
                    mask: &fx.masks[i],
                }
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
    }

    /// Central differences on three coordinates of every parameter tensor.
    fn check_gradients(net: &TryOnUNet, ex: &[TrainingExample<'_>], lambda: f64) -> usize {
        let (_, grads) = batch_loss_and_grads(net, ex, lambda).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for (pi, name) in net.params().names().iter().enumerate() {
            let len = net.params().tensors()[pi].len();
            for &j in &[0, len / 2, len - 1] {
                let mut plus = net.clone();
                plus.params_mut().tensors_mut()[pi].data_mut()[j] += h;
                let mut minus = net.clone();
                minus.params_mut().tensors_mut()[pi].data_mut()[j] -= h;
                let fp = batch_loss(&plus, ex, lambda).unwrap().total;
                let fm = batch_loss(&minus, ex, lambda).unwrap().total;
                let fd = (fp - fm) / (2.0 * h);
                let an = grads[pi].data()[j];
                assert!(
                    rel_err(an, fd) <= 1e-4 || (an - fd).abs() < 1e-9,
                    "{name}[{j}]: analytic {an} vs fd {fd}"
                );
                checked += 1;
            }
        }
        checked
    }

    #[test]
    fn breakdown_matches_record_oracle() {
        let net = TryOnUNet::init(tiny(AttentionKeys::Joint), 3).unwrap();
        let fx = fixture(1);
        let ex = examples(&fx);
        let b = batch_loss(&net, &ex, 1.0).unwrap();
        assert_eq!(b.total, b.ldm + b.ar);
        let sched = ScheduleConfig::default().build().unwrap();
        let mut ldm = 0.0;
        let mut ar = 0.0;
        for e in &ex {
            let (eps_hat, rec) = net.predict_noise(&e.bundle, e.t, e.tokens, &sched).unwrap();
            ldm += crate::losses::ldm_loss(&e.eps, &eps_hat).unwrap();
            ar += localization_loss(&rec, e.mask).unwrap();
        }
        assert!((b.ldm - ldm / 2.0).abs() < 1e-12);
        assert!((b.ar - ar / 2.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_fidelity_every_parameter_group() {
        let net = TryOnUNet::init(tiny(AttentionKeys::Joint), 3).unwrap();
        assert!(net.params().num_scalars() <= 10_000, "{}", net.params().num_scalars());
        let fx = fixture(2);
        let ex = examples(&fx);
        let n = check_gradients(&net, &ex, 1.0);
        assert_eq!(n, 3 * net.params().len());
    }

    #[test]
    fn localization_gradient_flows_through_softmax() {
        // With joint keys the garment share of each row is free to move, so
        // L_ar alone has a non-trivial gradient on the attention projections.
        let net = TryOnUNet::init(tiny(AttentionKeys::Joint), 4).unwrap();
        let fx = fixture(3);
        let ex = examples(&fx);
        let only_ar = |net: &TryOnUNet| batch_loss(net, &ex, 1.0).unwrap().ar;
        let (_, grads) = batch_loss_and_grads(&net, &ex, 1.0).unwrap();
        let (_, grads0) = batch_loss_and_grads(&net, &ex, 0.0).unwrap();
        let pi = net.params().names().iter().position(|n| n == "mid.xattn.q.w").unwrap();
        let ar_grad: Vec<f64> = grads[pi].data().iter().zip(grads0[pi].data()).map(|(a, b)| a - b).collect();
        assert!(ar_grad.iter().any(|v| v.abs() > 1e-8));
        let h = 1e-5;
        for j in [0, 5, 17] {
            let mut p = net.clone();
            p.params_mut().tensors_mut()[pi].data_mut()[j] += h;
            let mut m = net.clone();
            m.params_mut().tensors_mut()[pi].data_mut()[j] -= h;
            let fd = (only_ar(&p) - only_ar(&m)) / (2.0 * h);
            assert!(rel_err(ar_grad[j], fd) <= 1e-4 || (ar_grad[j] - fd).abs() < 1e-10, "{} vs {fd}", ar_grad[j]);
        }
    }

    #[test]
    fn garment_only_keys_make_localization_constant() {
        let net = TryOnUNet::init(tiny(AttentionKeys::Garment), 4).unwrap();
        let fx = fixture(3);
        let ex = examples(&fx);
        let b = batch_loss(&net, &ex, 1.0).unwrap();
        // Rows sum to one over the garment tokens, so L_ar = mean(1 − M_l) / n.
        let mut expect = 0.0;
        for m in &fx.masks {
            let mut per = 0.0;
            for (h, w) in [(4, 4), (2, 2), (4, 4)] {
                let r = crate::losses::resize_mask(m, h, w).unwrap();
                per += (1.0 - r.fraction()) / 4.0;
            }
            expect += per / 3.0;
        }
        assert!((b.ar - expect / 2.0).abs() < 1e-12);
        let (_, g1) = batch_loss_and_grads(&net, &ex, 1.0).unwrap();
        let (_, g0) = batch_loss_and_grads(&net, &ex, 0.0).unwrap();
        let gap = g1.iter().zip(&g0).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
        assert!(gap < 1e-12, "{gap}");
    }

    #[test]
    fn rejects_bad_batches() {
        let net = TryOnUNet::init(tiny(AttentionKeys::Garment), 4).unwrap();
        assert!(batch_loss(&net, &[], 1.0).is_err());
        let fx = fixture(3);
        let ex = examples(&fx);
        assert!(batch_loss(&net, &ex, -1.0).is_err());
        assert!(batch_loss(&net, &ex, f64::NAN).is_err());
    }
}
