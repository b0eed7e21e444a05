use divseg::divergence::{
    divergence, f_divergence, hpd, voxel_divergence_loss, DivergenceKind, HolderExponents, ProbVector,
};
use divseg::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn simplex(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(normalize)
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..7).prop_flat_map(|n| (simplex(n..n + 1), simplex(n..n + 1)))
}

fn pv(v: &[f64]) -> ProbVector {
    ProbVector::new(v.to_vec()).unwrap()
}

fn alpha() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![1.05, 1.1, 1.2, 2.0, 5.0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn hpd_is_non_negative((p, q) in pair(), a in alpha()) {
        let e = HolderExponents::new(a).unwrap();
        prop_assert!(hpd(&pv(&p), &pv(&q), e).unwrap() >= -1e-9);
    }

    #[test]
    fn hpd_vanishes_on_holder_equality(p in simplex(2..7), a in alpha()) {
        let e = HolderExponents::new(a).unwrap();
        let q = normalize(p.iter().map(|x| x.powf(e.alpha() / e.beta())).collect());
        prop_assert!(hpd(&pv(&p), &pv(&q), e).unwrap().abs() < 1e-9);
    }

    #[test]
    fn f_divergences_are_non_negative_and_zero_on_identity((p, q) in pair()) {
        for kind in DivergenceKind::TABLE_ORDER.into_iter().filter(|k| *k != DivergenceKind::Holder) {
            prop_assert!(f_divergence(kind, &pv(&p), &pv(&q)).unwrap() >= -1e-12, "{kind:?}");
            prop_assert!(f_divergence(kind, &pv(&p), &pv(&p)).unwrap().abs() < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn symmetric_divergences_are_symmetric((p, q) in pair()) {
        for kind in [DivergenceKind::TotalVariation, DivergenceKind::SquaredHellinger, DivergenceKind::JensenShannon] {
            let a = f_divergence(kind, &pv(&p), &pv(&q)).unwrap();
            let b = f_divergence(kind, &pv(&q), &pv(&p)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
        let tv = f_divergence(DivergenceKind::TotalVariation, &pv(&p), &pv(&q)).unwrap();
        prop_assert!(tv <= 1.0 + 1e-12);
        let js = f_divergence(DivergenceKind::JensenShannon, &pv(&p), &pv(&q)).unwrap();
        prop_assert!(js <= std::f64::consts::LN_2 + 1e-12);
    }
}

#[test]
fn pseudo_divergence_witness_matches_script_value() {
    // tests/oracles/divergence_values.py: 0.1183868740363745
    let p = pv(&[0.8, 0.2]);
    let v = hpd(&p, &p, HolderExponents::new(1.1).unwrap()).unwrap();
    assert!(v > 0.1);
    assert!((v - 0.118_386_874_036_374_5).abs() < 1e-6, "{v}");
}

#[test]
fn cauchy_schwarz_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e = HolderExponents::new(2.0).unwrap();
    for _ in 0..1000 {
        let n = rng.random_range(2..8);
        let p = normalize((0..n).map(|_| rng.random_range(0.01..1.0)).collect());
        let q = normalize((0..n).map(|_| rng.random_range(0.01..1.0)).collect());
        let dot: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
        let pp: f64 = p.iter().map(|a| a * a).sum();
        let qq: f64 = q.iter().map(|b| b * b).sum();
        let cs = -(dot / (pp * qq).sqrt()).ln();
        assert!((hpd(&pv(&p), &pv(&q), e).unwrap() - cs).abs() < 1e-12);
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    normalize(v.iter().map(|x| (x - m).exp()).collect())
}

#[test]
fn voxel_loss_is_mean_of_per_voxel_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let j = 3;
    let logits: Vec<f64> = (0..j * 8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut labels = vec![0.0; j * 8];
    for v in 0..8 {
        let col = normalize((0..j).map(|_| rng.random_range(0.05..1.0)).collect());
        for c in 0..j {
            labels[c * 8 + v] = col[c];
        }
    }
    for kind in DivergenceKind::TABLE_ORDER {
        let e = HolderExponents::new(1.1).unwrap();
        let mut tape = Tape::new();
        let lv = tape.constant(Tensor::new(vec![j, 2, 2, 2], logits.clone()).unwrap());
        let yv = tape.constant(Tensor::new(vec![j, 2, 2, 2], labels.clone()).unwrap());
        let loss = voxel_divergence_loss(&mut tape, lv, yv, kind, e).unwrap();
        let got = tape.value(loss).item().unwrap();
        let expect = (0..8)
            .map(|v| {
                let p = softmax(&(0..j).map(|c| logits[c * 8 + v]).collect::<Vec<_>>());
                let q: Vec<f64> = (0..j).map(|c| labels[c * 8 + v]).collect();
                divergence(kind, &pv(&p), &pv(&q), e).unwrap()
            })
            .sum::<f64>()
            / 8.0;
        assert!((got - expect).abs() < 1e-12, "{kind:?}: {got} vs {expect}");
    }
}

#[test]
fn closed_form_spot_values() {
    let kl = f_divergence(DivergenceKind::KullbackLeibler, &pv(&[0.5, 0.5]), &pv(&[0.25, 0.75])).unwrap();
    assert!((kl - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
    let tv = f_divergence(DivergenceKind::TotalVariation, &pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap();
    assert!((tv - 1.0).abs() < 2e-7);
    let p = pv(&[0.3, 0.7]);
    assert_eq!(f_divergence(DivergenceKind::JensenShannon, &p, &p).unwrap(), 0.0);
}
