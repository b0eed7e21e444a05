use divseg::model::{fuse, init_params, ArchConfig, Modality, ModalityMask};
use divseg::phantom::generate_phantom;
use divseg::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ArchConfig {
    ArchConfig {
        channels: vec![4, 4, 8],
        classes: 4,
        groups: 2,
    }
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

#[test]
fn fusion_is_symmetric_and_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shapes = [[2usize, 4, 4, 4], [3, 2, 2, 2]];
    let feats: Vec<Vec<Tensor>> = (0..4)
        .map(|_| shapes.iter().map(|s| random(s, &mut rng)).collect())
        .collect();
    let run = |order: &[usize]| -> Vec<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Vec<_>> = order
            .iter()
            .map(|&i| feats[i].iter().map(|t| tape.constant(t.clone())).collect())
            .collect();
        let fused = fuse(&mut tape, &vars).unwrap();
        fused.iter().map(|v| tape.value(*v).clone()).collect()
    };
    let base = run(&[0, 1, 2, 3]);
    for order in [[3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]] {
        for (a, b) in base.iter().zip(run(&order)) {
            assert!(a.max_abs_diff(&b) <= 1e-15);
        }
    }
    for (l, fused) in base.iter().enumerate() {
        let mean: Vec<f64> = (0..fused.numel())
            .map(|j| feats.iter().map(|f| f[l].data()[j]).sum::<f64>() / 4.0)
            .collect();
        assert!(fused.max_abs_diff(&Tensor::new(fused.shape().to_vec(), mean).unwrap()) < 1e-15);
    }

    let mut tape = Tape::new();
    let same: Vec<Vec<_>> = (0..4)
        .map(|_| feats[0].iter().map(|t| tape.constant(t.clone())).collect())
        .collect();
    let fused = fuse(&mut tape, &same).unwrap();
    for (v, t) in fused.iter().zip(&feats[0]) {
        assert!(tape.value(*v).max_abs_diff(t) < 1e-15);
    }
    let single = fuse(&mut tape, &same[..1]).unwrap();
    for (v, t) in single.iter().zip(&feats[0]) {
        assert_eq!(tape.value(*v), t);
    }
}

#[test]
fn parameter_count_ignores_the_mask() {
    let params = init_params(0, &ArchConfig::default()).unwrap();
    assert_eq!(params.count(), 118_484);
    let sample = generate_phantom(1, [16, 16, 16]).unwrap();
    for mask in ModalityMask::table_order() {
        let logits = params.predict(&sample.volumes, mask).unwrap();
        assert_eq!(logits.shape(), &[4, 16, 16, 16]);
        assert!(logits.all_finite());
    }
    assert_eq!(params.count(), 118_484);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masked_off_inputs_never_change_the_output(bits in 1u8..16, seed in any::<u64>(), junk in any::<u64>()) {
        let params = init_params(seed % 8, &tiny()).unwrap();
        let sample = generate_phantom(seed, [8, 8, 8]).unwrap();
        let mask = ModalityMask::from_bits(bits).unwrap();
        let clean = params.predict(&sample.volumes, mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(junk);
        let mut noisy = sample.volumes.clone();
        for m in Modality::ALL {
            if !mask.is_available(m) {
                noisy[m.index()] = random(&[1, 8, 8, 8], &mut rng).map(|v| v * 1e6);
            }
        }
        let dirty = params.predict(&noisy, mask).unwrap();
        prop_assert_eq!(clean.data(), dirty.data());
    }
}
