use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::config::ExperimentConfig;
use crate::bench::optim::Adam;
use crate::distill::{mi_transfer_loss, FeaturePair};
use crate::divergence::{voxel_divergence_loss, DivergenceKind, HolderExponents};
use crate::error::{Error, Result};
use crate::model::{bind_volumes, init_params, ModalityMask, ModelParams};
use crate::phantom::Sample;
use crate::segloss::{dice_loss, total_loss, total_loss_var, LossBreakdown};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Stream of the training generator; stream 0 of the same seed initializes
/// the parameters.
const TRAIN_STREAM: u64 = 1;

/// Uniform draw over the 15 non-empty modality subsets.
pub fn draw_mask(rng: &mut impl Rng) -> ModalityMask {
    ModalityMask::from_bits(rng.random_range(1..16u8)).expect("bits in 1..16")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub dice: f64,
    pub mi: f64,
    pub hd: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

/// Loss settings shared by every step of a run.
#[derive(Clone, Debug)]
pub struct Objective {
    pub divergence: DivergenceKind,
    pub exponents: HolderExponents,
    pub lambda_mi: f64,
    pub lambda_hd: f64,
    pub gammas: Vec<f64>,
    pub label_smoothing: f64,
}

impl Objective {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Objective {
            divergence: cfg.divergence,
            exponents: cfg.exponents()?,
            lambda_mi: cfg.lambda_mi,
            lambda_hd: cfg.lambda_hd,
            gammas: cfg.gammas()?,
            label_smoothing: cfg.label_smoothing,
        })
    }
}

/// Per-sample label encodings, computed once per run.
pub struct Targets {
    pub one_hot: Tensor,
    pub smoothed: Tensor,
}

impl Targets {
    pub fn new(sample: &Sample, classes: usize, tau: f64) -> Result<Self> {
        Ok(Targets {
            one_hot: sample.labels.one_hot(classes)?,
            smoothed: sample.labels.smoothed_one_hot(classes, tau)?,
        })
    }
}

/// Teacher taps: the full-modality fused features, off any student tape.
pub fn teacher_taps(params: &ModelParams, sample: &Sample) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, false);
    let full = ModalityMask::full();
    let inputs = bind_volumes(&mut tape, &sample.volumes, full)?;
    let taps = model.encode(&mut tape, &inputs, full)?;
    Ok(taps.iter().map(|&t| tape.value(t).clone()).collect())
}

/// Loss components of one sample under `mask`, plus the gradient of
/// `scale · total` for every parameter (in parameter order).
pub fn sample_gradients(
    params: &ModelParams,
    sample: &Sample,
    targets: &Targets,
    mask: ModalityMask,
    obj: &Objective,
    scale: f64,
) -> Result<(LossBreakdown, Vec<Option<Tensor>>)> {
    let teacher = if obj.lambda_mi != 0.0 {
        Some(teacher_taps(params, sample)?)
    } else {
        None
    };
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, true);
    let inputs = bind_volumes(&mut tape, &sample.volumes, mask)?;
    let out = model.forward(&mut tape, &inputs, mask)?;
    let probs = tape.softmax(out.logits, 0)?;
    let one_hot = tape.constant(targets.one_hot.clone());
    let dice = dice_loss(&mut tape, probs, one_hot)?;
    let hd = if obj.lambda_hd != 0.0 {
        let smoothed = tape.constant(targets.smoothed.clone());
        Some(voxel_divergence_loss(
            &mut tape,
            out.logits,
            smoothed,
            obj.divergence,
            obj.exponents,
        )?)
    } else {
        None
    };
    let mi = match teacher {
        Some(taps) => {
            let pairs: Vec<FeaturePair> = taps
                .into_iter()
                .zip(&out.taps)
                .map(|(t, &d_m)| FeaturePair {
                    d_f: tape.constant(t),
                    d_m,
                })
                .collect();
            Some(mi_transfer_loss(&mut tape, &[pairs], &model.heads(), &obj.gammas)?)
        }
        None => None,
    };
    let total = total_loss_var(&mut tape, dice, mi, hd, obj.lambda_mi, obj.lambda_hd)?;
    let value = |v: Option<crate::tape::Var>, tape: &Tape| v.map_or(Ok(0.0), |v| tape.value(v).item());
    let breakdown = total_loss(
        tape.value(dice).item()?,
        value(mi, &tape)?,
        value(hd, &tape)?,
        obj.lambda_mi,
        obj.lambda_hd,
    );
    let scaled = tape.mul_scalar(total, scale)?;
    let vars = model.vars().to_vec();
    let mut grads = tape.backward(scaled)?;
    Ok((breakdown, vars.into_iter().map(|v| grads.take(v)).collect()))
}

fn accumulate(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            (None, Some(g)) => *a = Some(g),
            (_, None) => {}
        }
    }
}

pub fn train(cfg: &ExperimentConfig, samples: &[Sample]) -> Result<TrainOutcome> {
    train_with(cfg, samples, |_| {})
}

/// Full training run; `on_epoch` sees each epoch's mean breakdown as it
/// completes.
pub fn train_with(
    cfg: &ExperimentConfig,
    samples: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let obj = Objective::from_config(cfg)?;
    let mut params = init_params(cfg.seed, &cfg.arch)?;
    let targets = samples
        .iter()
        .map(|s| Targets::new(s, cfg.arch.classes, cfg.label_smoothing))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::new(params.tensors(), cfg.learning_rate, cfg.weight_decay, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let scale = 1.0 / batch.len() as f64;
            let mut acc: Vec<Option<Tensor>> = vec![None; params.len()];
            for &i in batch {
                let mask = draw_mask(&mut rng);
                let (b, grads) =
                    sample_gradients(&params, &samples[i], &targets[i], mask, &obj, scale).map_err(|e| match e {
                        Error::NonFinite { .. } => {
                            Error::Numeric(format!("step {step}, sample {}, mask {mask}: {e}", samples[i].id))
                        }
                        other => other,
                    })?;
                if !b.total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "step {step}, sample {}: loss {b:?}",
                        samples[i].id
                    )));
                }
                for (s, v) in sums.iter_mut().zip([b.dice, b.mi, b.hd, b.total]) {
                    *s += v;
                }
                accumulate(&mut acc, grads);
            }
            opt.step(params.tensors_mut(), &acc);
            if let Some(bad) = params
                .named()
                .find(|(_, t)| !t.all_finite())
                .map(|(n, _)| n.to_string())
            {
                return Err(Error::Numeric(format!(
                    "step {step}: parameter {bad} became non-finite"
                )));
            }
        }
        let n = samples.len() as f64;
        let entry = EpochLog {
            epoch,
            dice: sums[0] / n,
            mi: sums[1] / n,
            hd: sums[2] / n,
            total: sums[3] / n,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

pub fn format_train_log(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,dice,mi,hd,total\n");
    for e in log {
        let _ = writeln!(
            out,
            "{},{:.17e},{:.17e},{:.17e},{:.17e}",
            e.epoch, e.dice, e.mi, e.hd, e.total
        );
    }
    out
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    fs::write(path, format_train_log(log))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;
    use crate::phantom::generate_phantom;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            arch: ArchConfig {
                channels: vec![4, 8],
                classes: 4,
                groups: 2,
            },
            epochs: 2,
            batch_size: 2,
            ..ExperimentConfig::default()
        }
    }

    fn samples(n: u64) -> Vec<Sample> {
        (0..n).map(|s| generate_phantom(s, [8, 8, 8]).unwrap()).collect()
    }

    #[test]
    fn mask_sampler_passes_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 16];
        let n = 15_000;
        for _ in 0..n {
            counts[draw_mask(&mut rng).bits() as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        let expected = n as f64 / 15.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // Upper 0.001 quantile of chi-square with 14 degrees of freedom.
        assert!(chi2 < 36.123, "chi2 = {chi2}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = samples(3);
        let a = train(&small_cfg(), &data).unwrap();
        let b = train(&small_cfg(), &data).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 2);
    }

    #[test]
    fn zero_lambdas_log_exact_zeros() {
        let cfg = ExperimentConfig {
            lambda_mi: 0.0,
            lambda_hd: 0.0,
            ..small_cfg()
        };
        let out = train(&cfg, &samples(2)).unwrap();
        for e in &out.log {
            assert_eq!((e.mi, e.hd), (0.0, 0.0));
            assert_eq!(e.total, e.dice);
        }
    }

    #[test]
    fn teacher_path_receives_no_gradient() {
        let cfg = small_cfg();
        let params = init_params(1, &cfg.arch).unwrap();
        let sample = generate_phantom(4, [8, 8, 8]).unwrap();
        let targets = Targets::new(&sample, 4, 0.05).unwrap();
        let obj = Objective {
            lambda_hd: 0.0,
            ..Objective::from_config(&cfg).unwrap()
        };
        let mask = ModalityMask::new([false, true, false, false]).unwrap();
        let (_, grads) = sample_gradients(&params, &sample, &targets, mask, &obj, 1.0).unwrap();
        for (name, g) in params.names().iter().zip(&grads) {
            if ["encoder.Fl", "encoder.T1c", "encoder.T1."]
                .iter()
                .any(|p| name.starts_with(p))
            {
                assert!(g.as_ref().is_none_or(|g| g.data().iter().all(|&v| v == 0.0)), "{name}");
            }
        }
    }

    #[test]
    fn log_format() {
        let text = format_train_log(&[EpochLog {
            epoch: 1,
            dice: 0.5,
            mi: 0.0,
            hd: 0.25,
            total: 0.75,
        }]);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,dice,mi,hd,total"));
        let fields: Vec<f64> = lines.next().unwrap().split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields, vec![1.0, 0.5, 0.0, 0.25, 0.75]);
    }
}
