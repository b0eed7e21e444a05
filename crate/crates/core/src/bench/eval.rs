use rayon::prelude::*;

use crate::bench::report::{DiceReport, SubsetRow};
use crate::error::{Error, Result};
use crate::model::{ModalityMask, ModelParams};
use crate::phantom::Sample;
use crate::segloss::{dsc_metric, LabelVolume, Region};
use crate::tensor::Tensor;

/// Runs `f` on a pool of `jobs` workers (`0` lets rayon pick).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Scores every sample under every subset with `predict(sample, mask)`
/// returning `[J, D, H, W]` logits. Rows come back in reporting order
/// regardless of `jobs`.
pub fn evaluate_with<F>(method: &str, samples: &[Sample], jobs: usize, predict: F) -> Result<DiceReport>
where
    F: Fn(&Sample, ModalityMask) -> Result<Tensor> + Sync,
{
    if samples.is_empty() {
        return Err(Error::config("test split is empty"));
    }
    let order = ModalityMask::table_order();
    let scored: Vec<Result<(SubsetRow, [usize; 3])>> = with_jobs(jobs, || {
        order
            .par_iter()
            .map(|&mask| {
                let mut sums = [0.0; 3];
                let mut empty = [0usize; 3];
                for s in samples {
                    let pred = LabelVolume::argmax(&predict(s, mask)?)?;
                    for (k, r) in Region::ALL.into_iter().enumerate() {
                        let d = dsc_metric(&pred, &s.labels, r)?;
                        sums[k] += d.value;
                        empty[k] += d.both_empty as usize;
                    }
                }
                let n = samples.len() as f64;
                Ok((
                    SubsetRow {
                        subset: mask.label(),
                        bits: mask.bits(),
                        wt: sums[0] / n,
                        tc: sums[1] / n,
                        et: sums[2] / n,
                    },
                    empty,
                ))
            })
            .collect()
    })?;
    let mut rows = Vec::with_capacity(order.len());
    let mut both_empty = [0usize; 3];
    for r in scored {
        let (row, empty) = r?;
        for k in 0..3 {
            both_empty[k] += empty[k];
        }
        rows.push(row);
    }
    Ok(DiceReport {
        method: method.to_string(),
        rows,
        both_empty,
    })
}

/// Mean test DSC per subset and region for a trained model.
pub fn evaluate_subsets(method: &str, params: &ModelParams, samples: &[Sample], jobs: usize) -> Result<DiceReport> {
    evaluate_with(method, samples, jobs, |s, mask| params.predict(&s.volumes, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ArchConfig};
    use crate::phantom::generate_phantom;

    fn samples() -> Vec<Sample> {
        (0..2).map(|s| generate_phantom(s, [8, 8, 8]).unwrap()).collect()
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let data = samples();
        let report = evaluate_with("oracle", &data, 1, |s, _| s.labels.one_hot(4)).unwrap();
        report.validate().unwrap();
        assert_eq!(report.rows.len(), 15);
        for row in &report.rows {
            assert_eq!((row.wt, row.tc, row.et), (1.0, 1.0, 1.0));
        }
        assert_eq!(report.grand_average(), 1.0);
    }

    #[test]
    fn parallel_equals_serial() {
        let data = samples();
        let arch = ArchConfig {
            channels: vec![4, 8],
            classes: 4,
            groups: 2,
        };
        let params = init_params(3, &arch).unwrap();
        let before = params.clone();
        let a = evaluate_subsets("m", &params, &data, 1).unwrap();
        let b = evaluate_subsets("m", &params, &data, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(params, before);
    }

    #[test]
    fn empty_split_is_config_error() {
        assert!(matches!(
            evaluate_with("x", &[], 1, |s, _| s.labels.one_hot(4)),
            Err(Error::Config(_))
        ));
    }
}
