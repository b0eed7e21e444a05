//! Segmentation losses and overlap metrics: soft Dice training loss, the
//! weighted total objective, hard-label DSC, and WT/TC/ET region grouping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smoothing constant of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// Integer class volume `[D, H, W]`: 0 background, 1 edema, 2 core, 3 enhancing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "label dims {dims:?} need {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Per-voxel argmax over axis 0 of `[J, D, H, W]` scores. Ties go to the
    /// lowest class index.
    pub fn argmax(scores: &Tensor) -> Result<Self> {
        let (j, d, h, w) = scores.volume_dims()?;
        let n = d * h * w;
        let s = scores.data();
        let data = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..j {
                    if s[c * n + i] > s[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelVolume::new([d, h, w], data)
    }

    /// `[J, D, H, W]` indicator tensor.
    pub fn one_hot(&self, classes: usize) -> Result<Tensor> {
        self.smoothed_one_hot(classes, 0.0)
    }

    /// `1 - tau` on the labelled class and `tau / (J - 1)` elsewhere.
    pub fn smoothed_one_hot(&self, classes: usize, tau: f64) -> Result<Tensor> {
        if classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::config(format!("label smoothing must be in [0, 1), got {tau}")));
        }
        if let Some(&bad) = self.data.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::config(format!("label {bad} outside {classes} classes")));
        }
        let n = self.data.len();
        let off = tau / (classes - 1) as f64;
        let mut out = vec![off; classes * n];
        for (i, &l) in self.data.iter().enumerate() {
            out[l as usize * n + i] = 1.0 - tau;
        }
        let [d, h, w] = self.dims;
        Tensor::new(vec![classes, d, h, w], out)
    }
}

/// Evaluation region built from a set of label classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "WT")]
    WholeTumor,
    #[serde(rename = "TC")]
    TumorCore,
    #[serde(rename = "ET")]
    EnhancingTumor,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WholeTumor, Region::TumorCore, Region::EnhancingTumor];

    pub fn classes(self) -> &'static [u8] {
        match self {
            Region::WholeTumor => &[1, 2, 3],
            Region::TumorCore => &[2, 3],
            Region::EnhancingTumor => &[3],
        }
    }

    pub fn contains(self, label: u8) -> bool {
        self.classes().contains(&label)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Region::WholeTumor => "WT",
            Region::TumorCore => "TC",
            Region::EnhancingTumor => "ET",
        }
    }
}

/// `1 - (1/J) Σ_j (2 Σ ŷy + ε) / (Σ ŷ² + Σ y² + ε)` over `[J, D, H, W]` inputs.
///
/// A class absent from both prediction and label scores a perfect ratio of 1.
pub fn dice_loss(tape: &mut Tape, pred_probs: Var, one_hot: Var) -> Result<Var> {
    let shape = tape.shape(pred_probs).to_vec();
    if shape != tape.shape(one_hot) {
        return Err(Error::shape(format!(
            "prediction {:?} and one-hot {:?} shapes differ",
            shape,
            tape.shape(one_hot)
        )));
    }
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "dice needs a class axis and voxels, got {shape:?}"
        )));
    }
    let spatial: Vec<usize> = (1..shape.len()).collect();
    let py = tape.mul(pred_probs, one_hot)?;
    let inter = tape.sum(py, &spatial)?;
    let num = tape.mul_scalar(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_EPS)?;
    let pp = tape.mul(pred_probs, pred_probs)?;
    let sp = tape.sum(pp, &spatial)?;
    let yy = tape.mul(one_hot, one_hot)?;
    let sy = tape.sum(yy, &spatial)?;
    let den = tape.add(sp, sy)?;
    let den = tape.add_scalar(den, DICE_EPS)?;
    let ratio = tape.div(num, den)?;
    let mean_ratio = tape.mean_all(ratio)?;
    let neg = tape.mul_scalar(mean_ratio, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Component values of the total objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dice: f64,
    pub mi: f64,
    pub hd: f64,
    pub total: f64,
    pub lambda_mi: f64,
    pub lambda_hd: f64,
}

pub fn total_loss(dice: f64, mi: f64, hd: f64, lambda_mi: f64, lambda_hd: f64) -> LossBreakdown {
    LossBreakdown {
        dice,
        mi,
        hd,
        total: dice + lambda_mi * mi + lambda_hd * hd,
        lambda_mi,
        lambda_hd,
    }
}

/// Same combination as [`total_loss`] on tape values, for backpropagation.
/// Terms with a zero weight are left out of the graph.
pub fn total_loss_var(
    tape: &mut Tape,
    dice: Var,
    mi: Option<Var>,
    hd: Option<Var>,
    lambda_mi: f64,
    lambda_hd: f64,
) -> Result<Var> {
    let mut total = dice;
    for (term, lambda) in [(mi, lambda_mi), (hd, lambda_hd)] {
        if let Some(v) = term.filter(|_| lambda != 0.0) {
            let weighted = tape.mul_scalar(v, lambda)?;
            total = tape.add(total, weighted)?;
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DscScore {
    pub value: f64,
    /// Region empty in both volumes; `value` is then 1.0 by convention.
    pub both_empty: bool,
}

/// `2 |P ∩ G| / (|P| + |G|)` after binarizing both volumes by `region`.
pub fn dsc_metric(pred: &LabelVolume, gt: &LabelVolume, region: Region) -> Result<DscScore> {
    if pred.dims != gt.dims {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} dims differ",
            pred.dims, gt.dims
        )));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (region.contains(a), region.contains(b));
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(DscScore {
            value: 1.0,
            both_empty: true,
        });
    }
    Ok(DscScore {
        value: 2.0 * both as f64 / (p + g) as f64,
        both_empty: false,
    })
}
