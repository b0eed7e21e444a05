//! Feature-level knowledge transfer from the full-modality pass to the
//! missing-modality pass through a variational Gaussian bound.
//!
//! Each tapped level `k` has a head predicting the teacher feature from the
//! student feature: a 1x1x1 convolution gives the per-voxel mean and a
//! per-channel `log_sigma` gives the spread. The loss is the Gaussian negative
//! log-likelihood (constant dropped), normalized by the element count of the
//! level and weighted by `gamma_k`.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// `gamma_k = k / K` for `k = 1..=K`.
pub fn gamma_schedule(levels: usize) -> Result<Vec<f64>> {
    if levels < 1 {
        return Err(Error::config("gamma schedule needs at least one level"));
    }
    Ok((1..=levels).map(|k| k as f64 / levels as f64).collect())
}

/// `Σ_{c,d,h,w} [ log σ_c + (d_f − μ)² / (2 σ_c²) ]` with `σ_c = exp(log_sigma_c)`.
///
/// `d_f` and `mu` are `[C, D, H, W]`; `log_sigma` is `[C]`.
pub fn variational_nll(tape: &mut Tape, d_f: Var, mu: Var, log_sigma: Var) -> Result<Var> {
    let shape = tape.shape(d_f).to_vec();
    if tape.shape(mu) != shape.as_slice() {
        return Err(Error::shape(format!(
            "mean {:?} does not match target {:?}",
            tape.shape(mu),
            shape
        )));
    }
    let (c, d, h, w) = tape.value(d_f).volume_dims()?;
    if tape.shape(log_sigma) != [c] {
        return Err(Error::shape(format!(
            "log_sigma must be [{c}], got {:?}",
            tape.shape(log_sigma)
        )));
    }
    let residual = tape.sub(d_f, mu)?;
    let sq = tape.mul(residual, residual)?;
    let ls = tape.reshape(log_sigma, &[c, 1, 1, 1])?;
    let neg2 = tape.mul_scalar(ls, -2.0)?;
    let inv_var = tape.exp(neg2)?;
    let scaled = tape.mul(sq, inv_var)?;
    let quad = tape.sum_all(scaled)?;
    let quad = tape.mul_scalar(quad, 0.5)?;
    let log_sum = tape.sum_all(log_sigma)?;
    let log_term = tape.mul_scalar(log_sum, (d * h * w) as f64)?;
    tape.add(log_term, quad)
}

/// Variational head parameters of one tapped level, bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[C, C, 1, 1, 1]`
    pub mu_weight: Var,
    /// `[C]`
    pub mu_bias: Var,
    /// `[C]`
    pub log_sigma: Var,
}

impl HeadVars {
    pub fn mean(&self, tape: &mut Tape, d_m: Var) -> Result<Var> {
        tape.conv3d(d_m, self.mu_weight, Some(self.mu_bias), 1, 0)
    }
}

/// Teacher and student features of one level for one sample.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePair {
    /// Full-modality feature; must not require a gradient.
    pub d_f: Var,
    /// Missing-modality feature.
    pub d_m: Var,
}

/// `Σ_k γ_k · mean_b [ nll(d_f, μ_k(d_m), log_sigma_k) / N_k ]` where `batch[b][k]`
/// is the pair of sample `b` at level `k`.
pub fn mi_transfer_loss(
    tape: &mut Tape,
    batch: &[Vec<FeaturePair>],
    heads: &[HeadVars],
    gammas: &[f64],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::config("mutual-information loss over an empty batch"));
    }
    if heads.len() != gammas.len() {
        return Err(Error::config(format!(
            "{} heads but {} gamma weights",
            heads.len(),
            gammas.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (k, (head, &gamma)) in heads.iter().zip(gammas).enumerate() {
        let mut level: Option<Var> = None;
        for sample in batch {
            if sample.len() != heads.len() {
                return Err(Error::config(format!(
                    "{} feature pairs but {} heads",
                    sample.len(),
                    heads.len()
                )));
            }
            let pair = sample[k];
            if tape.requires_grad(pair.d_f) {
                return Err(Error::Contract(format!(
                    "teacher feature at level {} is not detached",
                    k + 1
                )));
            }
            let mu = head.mean(tape, pair.d_m)?;
            let nll = variational_nll(tape, pair.d_f, mu, head.log_sigma)?;
            level = Some(match level {
                Some(acc) => tape.add(acc, nll)?,
                None => nll,
            });
        }
        let n_k = tape.value(batch[0][k].d_f).numel() as f64;
        let level = level.expect("batch is non-empty");
        let weighted = tape.mul_scalar(level, gamma / (n_k * batch.len() as f64))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    total.ok_or_else(|| Error::config("mutual-information loss needs at least one level"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn nll_value(d_f: &Tensor, mu: &Tensor, log_sigma: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let f = tape.constant(d_f.clone());
        let m = tape.constant(mu.clone());
        let s = tape.constant(log_sigma.clone());
        let v = variational_nll(&mut tape, f, m, s).unwrap();
        tape.value(v).item().unwrap()
    }

    /// Direct loop over (c, voxel).
    fn nll_oracle(d_f: &Tensor, mu: &Tensor, log_sigma: &[f64]) -> f64 {
        let c = d_f.shape()[0];
        let per = d_f.numel() / c;
        let mut total = 0.0;
        for (ch, ls) in log_sigma.iter().enumerate().take(c) {
            let sigma = ls.exp();
            for i in 0..per {
                let r = d_f.data()[ch * per + i] - mu.data()[ch * per + i];
                total += sigma.ln() + r * r / (2.0 * sigma * sigma);
            }
        }
        total
    }

    #[test]
    fn gamma_cases() {
        assert_eq!(gamma_schedule(1).unwrap(), vec![1.0]);
        let g = gamma_schedule(3).unwrap();
        assert!((g[0] - 1.0 / 3.0).abs() < 1e-15 && (g[1] - 2.0 / 3.0).abs() < 1e-15 && g[2] == 1.0);
        let g = gamma_schedule(5).unwrap();
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(gamma_schedule(0), Err(Error::Config(_))));
    }

    #[test]
    fn nll_spot_values() {
        let x = Tensor::full(&[2, 1, 2, 2], 0.7);
        assert_eq!(nll_value(&x, &x, &Tensor::zeros(&[2])), 0.0);
        let one = Tensor::full(&[1, 1, 1, 1], 1.0);
        let zero = Tensor::zeros(&[1, 1, 1, 1]);
        assert_eq!(nll_value(&one, &zero, &Tensor::zeros(&[1])), 0.5);
    }

    #[test]
    fn nll_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let d_f = random(&mut rng, &[3, 2, 2, 3]);
            let mu = random(&mut rng, &[3, 2, 2, 3]);
            let ls: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = nll_value(&d_f, &mu, &Tensor::from_vec(ls.clone()));
            let want = nll_oracle(&d_f, &mu, &ls);
            assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn nll_shape_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[3, 1, 1, 1]));
        let s = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            variational_nll(&mut tape, a, b, s),
            Err(Error::InvalidShape(_))
        ));
        let s3 = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            variational_nll(&mut tape, a, a, s3),
            Err(Error::InvalidShape(_))
        ));
    }

    fn identity_head(tape: &mut Tape, c: usize) -> HeadVars {
        let mut w = Tensor::zeros(&[c, c, 1, 1, 1]);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        HeadVars {
            mu_weight: tape.leaf(w),
            mu_bias: tape.leaf(Tensor::zeros(&[c])),
            log_sigma: tape.leaf(Tensor::zeros(&[c])),
        }
    }

    #[test]
    fn perfect_heads_give_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let heads = [identity_head(&mut tape, 2), identity_head(&mut tape, 3)];
        let f1 = random(&mut rng, &[2, 2, 2, 2]);
        let f2 = random(&mut rng, &[3, 1, 1, 1]);
        let pairs = vec![
            FeaturePair {
                d_f: tape.constant(f1.clone()),
                d_m: tape.constant(f1),
            },
            FeaturePair {
                d_f: tape.constant(f2.clone()),
                d_m: tape.constant(f2),
            },
        ];
        let loss = mi_transfer_loss(&mut tape, &[pairs], &heads, &gamma_schedule(2).unwrap()).unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-15);
    }

    #[test]
    fn single_level_reduces_to_normalized_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d_f = random(&mut rng, &[2, 2, 2, 2]);
        let d_m = random(&mut rng, &[2, 2, 2, 2]);
        let mut tape = Tape::new();
        let head = identity_head(&mut tape, 2);
        let pair = FeaturePair {
            d_f: tape.constant(d_f.clone()),
            d_m: tape.constant(d_m.clone()),
        };
        let loss = mi_transfer_loss(&mut tape, &[vec![pair]], &[head], &[1.0]).unwrap();
        let want = nll_oracle(&d_f, &d_m, &[0.0, 0.0]) / 16.0;
        assert!((tape.value(loss).item().unwrap() - want).abs() < 1e-14);
    }

    fn two_level_loss(gammas: &[f64], order: &[usize]) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<[Tensor; 4]> = (0..3)
            .map(|_| {
                [
                    random(&mut rng, &[2, 2, 2, 2]),
                    random(&mut rng, &[2, 2, 2, 2]),
                    random(&mut rng, &[4, 1, 1, 1]),
                    random(&mut rng, &[4, 1, 1, 1]),
                ]
            })
            .collect();
        let mut tape = Tape::new();
        let heads = [identity_head(&mut tape, 2), identity_head(&mut tape, 4)];
        let batch: Vec<Vec<FeaturePair>> = order
            .iter()
            .map(|&b| {
                let s = &samples[b];
                vec![
                    FeaturePair {
                        d_f: tape.constant(s[0].clone()),
                        d_m: tape.constant(s[1].clone()),
                    },
                    FeaturePair {
                        d_f: tape.constant(s[2].clone()),
                        d_m: tape.constant(s[3].clone()),
                    },
                ]
            })
            .collect();
        let loss = mi_transfer_loss(&mut tape, &batch, &heads, gammas).unwrap();
        tape.value(loss).item().unwrap()
    }

    #[test]
    fn loss_is_linear_in_gamma() {
        let base = two_level_loss(&[0.5, 1.0], &[0, 1, 2]);
        let only_first = two_level_loss(&[0.5, 0.0], &[0, 1, 2]);
        let doubled = two_level_loss(&[1.0, 1.0], &[0, 1, 2]);
        assert!((doubled - (base + only_first)).abs() < 1e-12);
    }

    #[test]
    fn batch_order_does_not_matter() {
        let a = two_level_loss(&[0.5, 1.0], &[0, 1, 2]);
        let b = two_level_loss(&[0.5, 1.0], &[2, 0, 1]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_when_mean_matches_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d_f = random(&mut rng, &[3, 2, 2, 2]);
        let mut tape = Tape::new();
        let f = tape.constant(d_f.clone());
        let mu = tape.leaf(d_f);
        let ls = tape.constant(Tensor::from_vec(vec![0.3, -0.2, 0.1]));
        let loss = variational_nll(&mut tape, f, mu, ls).unwrap();
        let g = tape.backward(loss).unwrap();
        let norm: f64 = g.get(mu).unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-10);
    }

    #[test]
    fn closed_form_sigma_does_not_increase_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let d_f = random(&mut rng, &[3, 2, 2, 2]);
            let mu = random(&mut rng, &[3, 2, 2, 2]);
            let ls: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let before = nll_value(&d_f, &mu, &Tensor::from_vec(ls));
            let best: Vec<f64> = (0..3)
                .map(|c| {
                    let msr = (0..8)
                        .map(|i| (d_f.data()[c * 8 + i] - mu.data()[c * 8 + i]).powi(2))
                        .sum::<f64>()
                        / 8.0;
                    0.5 * msr.ln()
                })
                .collect();
            let after = nll_value(&d_f, &mu, &Tensor::from_vec(best));
            assert!(after <= before + 1e-12);
        }
    }

    #[test]
    fn undetached_teacher_is_rejected() {
        let mut tape = Tape::new();
        let head = identity_head(&mut tape, 1);
        let f = tape.leaf(Tensor::zeros(&[1, 1, 1, 1]));
        let pair = FeaturePair { d_f: f, d_m: f };
        assert!(matches!(
            mi_transfer_loss(&mut tape, &[vec![pair]], &[head], &[1.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mismatched_lengths_are_config_errors() {
        let mut tape = Tape::new();
        let head = identity_head(&mut tape, 1);
        let f = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let pair = FeaturePair { d_f: f, d_m: f };
        assert!(matches!(
            mi_transfer_loss(&mut tape, &[vec![pair]], &[head], &[0.5, 1.0]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            mi_transfer_loss(&mut tape, &[vec![pair, pair]], &[head], &[1.0]),
            Err(Error::Config(_))
        ));
    }
}
