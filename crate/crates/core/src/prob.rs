//! Probabilistic point representation: invariance plus reparameterized
//! variance, the KL and latent reconstruction losses, and the fused
//! adaptiveness factor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::nn::{Bound, Linear, Mlp2, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

pub const LATENT: usize = 8;
const HIDDEN: usize = 16;

/// Adds the heads for point width `c` and `layers` adaptiveness outputs.
pub fn init_prob<R: Rng>(params: &mut ParamSet, c: usize, layers: usize, rng: &mut R) {
    Mlp2::init(params, "prob.inv", [c, HIDDEN, c], rng);
    Linear::init(params, "prob.mu", c, c, true, rng);
    Linear::init(params, "prob.logsig", c, c, true, rng);
    Mlp2::init(params, "prob.enc", [c, HIDDEN, LATENT], rng);
    Mlp2::init(params, "prob.dec", [c, HIDDEN, LATENT], rng);
    Linear::init(params, "prob.proj", c, layers, false, rng);
    Linear::init(params, "prob.fuse", 2 * layers, layers, true, rng);
    Linear::init(params, "prob.direct", c, layers, true, rng);
}

pub fn invariant_head(tape: &mut Tape, b: &Bound, f: Var) -> Result<Var> {
    Mlp2::bind(b, "prob.inv")?.forward(tape, f)
}

/// `(mu, log sigma)`; sigma itself is `exp` of the second.
pub fn posterior(tape: &mut Tape, b: &Bound, f: Var) -> Result<(Var, Var)> {
    let mu = Linear::bind(b, "prob.mu")?.forward(tape, f)?;
    let log_sigma = Linear::bind(b, "prob.logsig")?.forward(tape, f)?;
    Ok((mu, log_sigma))
}

/// Standard normal draws for one ray, `[n, d]`, from stream `ray` of `seed`
/// so rays can be drawn in any order.
pub fn ray_noise(seed: u64, ray: u64, n: usize, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ray);
    (0..n * d).map(|_| rng.sample(StandardNormal)).collect()
}

/// `mu + sigma * eps`; `eps` is a constant so only `mu` and `sigma` get
/// gradient. `None` means the posterior mean.
pub fn sample_variance(tape: &mut Tape, mu: Var, sigma: Var, eps: Option<&Tensor>) -> Result<Var> {
    match eps {
        None => Ok(mu),
        Some(e) => {
            let e = tape.constant(e);
            let spread = tape.mul(sigma, e)?;
            tape.add(mu, spread)
        }
    }
}

/// Mean over rows of `KL(N(mu, sigma^2) || N(0, 1))`, summed over width.
pub fn kl_loss(tape: &mut Tape, mu: Var, log_sigma: Var) -> Result<Var> {
    let rows = tape.shape(mu)[0] as f64;
    let two_s = tape.scale(log_sigma, 2.0);
    let var = tape.exp(two_s);
    let mu2 = tape.square(mu);
    let t = tape.add_scalar(two_s, 1.0);
    let t = tape.sub(t, mu2)?;
    let t = tape.sub(t, var)?;
    let s = tape.sum(t);
    Ok(tape.scale(s, -0.5 / rows))
}

/// Mean over rows of `|Enc(f) - Dec(F)|^2`.
pub fn rec_loss(tape: &mut Tape, b: &Bound, f: Var, fused: Var) -> Result<Var> {
    let rows = tape.shape(f)[0] as f64;
    let e = Mlp2::bind(b, "prob.enc")?.forward(tape, f)?;
    let d = Mlp2::bind(b, "prob.dec")?.forward(tape, fused)?;
    let diff = tape.sub(e, d)?;
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / rows))
}

/// `base + alpha * (sum of extras)`; `base` may be absent.
pub fn fuse_point(tape: &mut Tape, base: Option<Var>, extras: &[Var], alpha: f64) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &e in extras {
        acc = Some(match acc {
            None => e,
            Some(a) => tape.add(a, e)?,
        });
    }
    let scaled = acc.map(|a| tape.scale(a, alpha));
    match (base, scaled) {
        (Some(b), Some(s)) => tape.add(b, s),
        (Some(b), None) => Ok(b),
        (None, Some(s)) => Ok(s),
        (None, None) => Err(crate::error::Error::invalid("fuse_point needs at least one term")),
    }
}

/// `sigmoid(W [a_x, P F_x] + b)`, one value per target layer.
pub fn adaptiveness(tape: &mut Tape, b: &Bound, a_x: Var, fused: Var) -> Result<Var> {
    let p = Linear::bind(b, "prob.proj")?.forward(tape, fused)?;
    let cat = tape.concat(&[a_x, p], 1)?;
    let logits = Linear::bind(b, "prob.fuse")?.forward(tape, cat)?;
    Ok(tape.sigmoid(logits))
}

/// Adaptiveness regressed from `F_x` alone, skipping the volume term.
pub fn adaptiveness_direct(tape: &mut Tape, b: &Bound, fused: Var) -> Result<Var> {
    let logits = Linear::bind(b, "prob.direct")?.forward(tape, fused)?;
    Ok(tape.sigmoid(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mlp2_reference;
    use crate::tensor::finite_difference_check;

    fn heads(seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_prob(&mut p, 5, 3, &mut rng);
        for (_, t) in p.iter_mut() {
            if t.rank() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
            }
        }
        p
    }

    fn zeroed(p: &ParamSet, prefix: &str) -> ParamSet {
        let mut q = p.clone();
        for (name, t) in q.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
            }
        }
        q
    }

    fn dense(p: &ParamSet, name: &str, x: &[f64]) -> Vec<f64> {
        let w = p.get(&format!("{name}.w")).unwrap();
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        let b = p.get(&format!("{name}.b"));
        (0..n_out)
            .map(|o| (0..n_in).map(|i| x[i] * w.data()[i * n_out + o]).sum::<f64>() + b.map_or(0.0, |b| b.data()[o]))
            .collect()
    }

    fn rows(seed: u64, n: usize, d: usize) -> Tensor {
        Tensor::randn(&[n, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn invariant_head_is_a_plain_mlp() {
        let p = heads(1);
        let x = rows(2, 4, 5);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let xv = tape.constant(&x);
        let y1 = invariant_head(&mut tape, &b, xv).unwrap();
        let y2 = invariant_head(&mut tape, &b, xv).unwrap();
        assert_eq!(tape.value(y1), tape.value(y2));
        for r in 0..4 {
            let want = mlp2_reference(&p, "prob.inv", &x.data()[r * 5..r * 5 + 5]);
            for (g, w) in tape.value(y1)[r * 5..r * 5 + 5].iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
        let z = zeroed(&p, "prob.inv");
        let b = z.bind(&mut tape);
        let y = invariant_head(&mut tape, &b, xv).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn posterior_heads() {
        let p = heads(3);
        let x = rows(4, 6, 5);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let xv = tape.constant(&x);
        let (mu, ls) = posterior(&mut tape, &b, xv).unwrap();
        let sigma = tape.exp(ls);
        for r in 0..6 {
            let row = &x.data()[r * 5..r * 5 + 5];
            let wm = dense(&p, "prob.mu", row);
            let ws = dense(&p, "prob.logsig", row);
            for j in 0..5 {
                assert!((tape.value(mu)[r * 5 + j] - wm[j]).abs() < 1e-12);
                assert!((tape.value(sigma)[r * 5 + j] - ws[j].exp()).abs() < 1e-12);
                assert!(tape.value(sigma)[r * 5 + j] > 0.0);
            }
        }
        let z = zeroed(&zeroed(&p, "prob.mu"), "prob.logsig");
        let b = z.bind(&mut tape);
        let (mu, ls) = posterior(&mut tape, &b, xv).unwrap();
        let sigma = tape.exp(ls);
        assert!(tape.value(mu).iter().all(|&v| v == 0.0));
        assert!(tape.value(sigma).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reparameterized_samples() {
        let mut tape = Tape::new();
        let n = 100_000;
        let mu = tape.constant_from(vec![n, 1], vec![1.0; n]).unwrap();
        let sigma = tape.constant_from(vec![n, 1], vec![2.0; n]).unwrap();
        let eps = Tensor::new(vec![n, 1], ray_noise(42, 0, n, 1)).unwrap();
        let s = sample_variance(&mut tape, mu, sigma, Some(&eps)).unwrap();
        let v = tape.value(s);
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        assert!((std - 2.0).abs() < 0.04, "{std}");
        assert_eq!(ray_noise(42, 3, 4, 2), ray_noise(42, 3, 4, 2));
        assert_ne!(ray_noise(42, 3, 4, 2), ray_noise(42, 4, 4, 2));

        let tiny = tape.constant_from(vec![n, 1], vec![1e-300; n]).unwrap();
        let s = sample_variance(&mut tape, mu, tiny, Some(&eps)).unwrap();
        assert!(tape.value(s).iter().all(|&x| x == 1.0));
        let s = sample_variance(&mut tape, mu, sigma, None).unwrap();
        assert_eq!(s, mu);
    }

    #[test]
    fn kl_closed_forms() {
        let mut tape = Tape::new();
        let zeros = tape.constant_from(vec![3, 2], vec![0.0; 6]).unwrap();
        let kl = kl_loss(&mut tape, zeros, zeros).unwrap();
        assert_eq!(tape.scalar_value(kl), 0.0);
        let one = tape.constant_from(vec![1, 1], vec![1.0]).unwrap();
        let zero = tape.constant_from(vec![1, 1], vec![0.0]).unwrap();
        let kl = kl_loss(&mut tape, one, zero).unwrap();
        assert!((tape.scalar_value(kl) - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mu = tape.constant(&Tensor::randn(&[4, 3], 2.0, &mut rng));
            let ls = tape.constant(&Tensor::randn(&[4, 3], 1.0, &mut rng));
            let kl = kl_loss(&mut tape, mu, ls).unwrap();
            let mut want = 0.0;
            for (m, s) in tape.value(mu).iter().zip(tape.value(ls)) {
                let var = (2.0 * s).exp();
                want += (m * m + var - 1.0 - 2.0 * s) / 2.0;
            }
            assert!(tape.scalar_value(kl) >= 0.0);
            assert!((tape.scalar_value(kl) - want / 4.0).abs() < 1e-10);
        }
    }

    #[test]
    fn reconstruction_loss() {
        let p = heads(6);
        let (f, big_f) = (rows(7, 5, 5), rows(8, 5, 5));
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let fv = tape.constant(&f);
        let gv = tape.constant(&big_f);
        let l = rec_loss(&mut tape, &b, fv, gv).unwrap();
        let mut want = 0.0;
        for r in 0..5 {
            let e = mlp2_reference(&p, "prob.enc", &f.data()[r * 5..r * 5 + 5]);
            let d = mlp2_reference(&p, "prob.dec", &big_f.data()[r * 5..r * 5 + 5]);
            want += e.iter().zip(&d).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        assert!((tape.scalar_value(l) - want / 5.0).abs() < 1e-12);

        let z = zeroed(&zeroed(&p, "prob.enc"), "prob.dec");
        let b = z.bind(&mut tape);
        let l = rec_loss(&mut tape, &b, fv, gv).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
        // Same maps for both sides and identical inputs.
        let mut same = p.clone();
        for (name, t) in p.iter() {
            if let Some(rest) = name.strip_prefix("prob.enc") {
                same.insert(format!("prob.dec{rest}"), t.clone());
            }
        }
        let b = same.bind(&mut tape);
        let l = rec_loss(&mut tape, &b, fv, fv).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
    }

    #[test]
    fn fusion_arithmetic() {
        let mut tape = Tape::new();
        let f = tape.constant_from(vec![1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        let fi = tape.constant_from(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let fv = tape.constant_from(vec![1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        let zero = tape.constant_from(vec![1, 3], vec![0.0; 3]).unwrap();
        let out = fuse_point(&mut tape, Some(f), &[fi, fv], 0.0).unwrap();
        assert_eq!(tape.value(out), tape.value(f));
        let out = fuse_point(&mut tape, Some(f), &[zero, zero], 0.3).unwrap();
        assert_eq!(tape.value(out), tape.value(f));
        let out = fuse_point(&mut tape, Some(f), &[fi, fv], 0.3).unwrap();
        let want = [1.6, 1.0, 0.3];
        for (g, w) in tape.value(out).iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn adaptiveness_head() {
        let p = heads(9);
        let (a, big_f) = (rows(10, 4, 3), rows(11, 4, 5));
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let av = tape.constant(&a);
        let fv = tape.constant(&big_f);
        let out = adaptiveness(&mut tape, &b, av, fv).unwrap();
        for r in 0..4 {
            let proj = dense(&p, "prob.proj", &big_f.data()[r * 5..r * 5 + 5]);
            let mut cat = a.data()[r * 3..r * 3 + 3].to_vec();
            cat.extend(proj);
            let logits = dense(&p, "prob.fuse", &cat);
            for l in 0..3 {
                let want = 1.0 / (1.0 + (-logits[l]).exp());
                let got = tape.value(out)[r * 3 + l];
                assert!((got - want).abs() < 1e-12);
                assert!(got > 0.0 && got < 1.0);
            }
        }
        let z = zeroed(&p, "prob.fuse");
        let b = z.bind(&mut tape);
        let out = adaptiveness(&mut tape, &b, av, fv).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn prob_losses_pass_gradcheck() {
        let p = heads(12);
        let f = rows(13, 4, 5);
        let eps = rows(14, 4, 5);
        for name in ["prob.inv.0.w", "prob.inv.1.b", "prob.mu.w", "prob.logsig.w", "prob.logsig.b", "prob.enc.0.w", "prob.dec.1.w"] {
            let x = p.get(name).unwrap().clone();
            let check = finite_difference_check(
                |tape, x| {
                    let b = p.bind_frozen(tape).with(name, x);
                    let fv = tape.constant(&f);
                    let fi = invariant_head(tape, &b, fv)?;
                    let (mu, ls) = posterior(tape, &b, fv)?;
                    let sigma = tape.exp(ls);
                    let s = sample_variance(tape, mu, sigma, Some(&eps))?;
                    let fused = fuse_point(tape, Some(fv), &[fi, s], 0.3)?;
                    let kl = kl_loss(tape, mu, ls)?;
                    let rec = rec_loss(tape, &b, fv, fused)?;
                    tape.add(kl, rec)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(check.max_rel_error < 1e-4, "{name}: {check:?}");
        }
    }
}
