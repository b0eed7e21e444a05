//! Hölder pseudo-divergence, a small f-divergence family, and the
//! voxel-averaged divergence loss between predicted and label distributions.
//!
//! Two routes compute the same quantities: plain functions over
//! [`ProbVector`] for single distributions, and tape expressions over
//! `[J, D, H, W]` volumes for training. Probabilities are floored at
//! [`PROB_FLOOR`] before any power or logarithm and are not renormalized.
//! Logarithms are natural.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

pub const PROB_FLOOR: f64 = 1e-7;

/// A discrete distribution over classes, floored at [`PROB_FLOOR`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Accepts non-negative values summing to one within 1e-6.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::shape("empty probability vector"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain {
                op: "prob_vector",
                detail: format!("entries must be finite and non-negative: {values:?}"),
            });
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Domain {
                op: "prob_vector",
                detail: format!("entries sum to {total}, not 1"),
            });
        }
        Ok(ProbVector(
            values.into_iter().map(|v| v.clamp(PROB_FLOOR, 1.0)).collect(),
        ))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Conjugate exponents `alpha > 1` and `beta = alpha / (alpha - 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HolderExponents {
    alpha: f64,
    beta: f64,
}

impl HolderExponents {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 1.0) {
            return Err(Error::config(format!("Hölder exponent alpha must be > 1, got {alpha}")));
        }
        Ok(HolderExponents {
            alpha,
            beta: alpha / (alpha - 1.0),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    #[serde(alias = "hölder")]
    Holder,
    TotalVariation,
    SquaredHellinger,
    KullbackLeibler,
    NeymanChi2,
    JensenShannon,
}

impl DivergenceKind {
    /// The five f-divergences followed by Hölder, in comparison-table order.
    pub const TABLE_ORDER: [DivergenceKind; 6] = [
        DivergenceKind::TotalVariation,
        DivergenceKind::SquaredHellinger,
        DivergenceKind::KullbackLeibler,
        DivergenceKind::NeymanChi2,
        DivergenceKind::JensenShannon,
        DivergenceKind::Holder,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DivergenceKind::Holder => "Hölder",
            DivergenceKind::TotalVariation => "Total Variation",
            DivergenceKind::SquaredHellinger => "Squared Hellinger",
            DivergenceKind::KullbackLeibler => "Kullback-Leibler",
            DivergenceKind::NeymanChi2 => "Neyman χ²",
            DivergenceKind::JensenShannon => "Jensen-Shannon",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            DivergenceKind::Holder => "holder",
            DivergenceKind::TotalVariation => "total_variation",
            DivergenceKind::SquaredHellinger => "squared_hellinger",
            DivergenceKind::KullbackLeibler => "kullback_leibler",
            DivergenceKind::NeymanChi2 => "neyman_chi2",
            DivergenceKind::JensenShannon => "jensen_shannon",
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.to_ascii_lowercase().as_str() {
            "holder" | "hölder" | "hpd" => DivergenceKind::Holder,
            "total_variation" | "tv" => DivergenceKind::TotalVariation,
            "squared_hellinger" | "sh" => DivergenceKind::SquaredHellinger,
            "kullback_leibler" | "kl" => DivergenceKind::KullbackLeibler,
            "neyman_chi2" | "neyman" => DivergenceKind::NeymanChi2,
            "jensen_shannon" | "js" => DivergenceKind::JensenShannon,
            other => return Err(Error::config(format!("unknown divergence kind `{other}`"))),
        };
        Ok(kind)
    }
}

fn check_lengths(p: &ProbVector, q: &ProbVector) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::shape(format!(
            "probability vectors differ in length: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// `-log( Σ p q / (‖p‖_α ‖q‖_β) )`.
pub fn hpd(p: &ProbVector, q: &ProbVector, e: HolderExponents) -> Result<f64> {
    check_lengths(p, q)?;
    let (p, q) = (p.values(), q.values());
    let inner: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let norm_p = p.iter().map(|a| a.powf(e.alpha)).sum::<f64>().ln() * (1.0 / e.alpha);
    let norm_q = q.iter().map(|b| b.powf(e.beta)).sum::<f64>().ln() * (1.0 / e.beta);
    Ok((norm_p + norm_q) - inner.ln())
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a.ln() - b.ln())).sum()
}

pub fn f_divergence(kind: DivergenceKind, p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_lengths(p, q)?;
    let (p, q) = (p.values(), q.values());
    let pairs = p.iter().zip(q);
    let value = match kind {
        DivergenceKind::TotalVariation => 0.5 * pairs.map(|(a, b)| (a - b).abs()).sum::<f64>(),
        DivergenceKind::SquaredHellinger => pairs.map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum(),
        DivergenceKind::KullbackLeibler => kl(p, q),
        DivergenceKind::NeymanChi2 => pairs.map(|(a, b)| (a - b).powi(2) / a).sum(),
        DivergenceKind::JensenShannon => {
            let m: Vec<f64> = pairs.map(|(a, b)| 0.5 * (a + b)).collect();
            0.5 * kl(p, &m) + 0.5 * kl(q, &m)
        }
        DivergenceKind::Holder => {
            return Err(Error::config("the Hölder pseudo-divergence is not an f-divergence"));
        }
    };
    Ok(value)
}

/// Either [`hpd`] or [`f_divergence`] depending on `kind`.
pub fn divergence(kind: DivergenceKind, p: &ProbVector, q: &ProbVector, e: HolderExponents) -> Result<f64> {
    match kind {
        DivergenceKind::Holder => hpd(p, q, e),
        _ => f_divergence(kind, p, q),
    }
}

/// Divergence along axis 0 of two floored distributions on the tape. The
/// result keeps axis 0 with extent 1.
pub fn divergence_along_classes(
    tape: &mut Tape,
    kind: DivergenceKind,
    p: Var,
    q: Var,
    e: HolderExponents,
) -> Result<Var> {
    if tape.shape(p) != tape.shape(q) {
        return Err(Error::shape(format!(
            "distribution shapes differ: {:?} vs {:?}",
            tape.shape(p),
            tape.shape(q)
        )));
    }
    let over = |tape: &mut Tape, v: Var| tape.sum(v, &[0]);
    match kind {
        DivergenceKind::Holder => {
            let pq = tape.mul(p, q)?;
            let inner = over(tape, pq)?;
            let log_inner = tape.ln(inner)?;
            let pa = tape.powf(p, e.alpha)?;
            let sa = over(tape, pa)?;
            let la = tape.ln(sa)?;
            let la = tape.mul_scalar(la, 1.0 / e.alpha)?;
            let qb = tape.powf(q, e.beta)?;
            let sb = over(tape, qb)?;
            let lb = tape.ln(sb)?;
            let lb = tape.mul_scalar(lb, 1.0 / e.beta)?;
            let norms = tape.add(la, lb)?;
            tape.sub(norms, log_inner)
        }
        DivergenceKind::TotalVariation => {
            let d = tape.sub(p, q)?;
            let a = tape.abs(d)?;
            let s = over(tape, a)?;
            tape.mul_scalar(s, 0.5)
        }
        DivergenceKind::SquaredHellinger => {
            let sp = tape.powf(p, 0.5)?;
            let sq = tape.powf(q, 0.5)?;
            let d = tape.sub(sp, sq)?;
            let d2 = tape.mul(d, d)?;
            over(tape, d2)
        }
        DivergenceKind::KullbackLeibler => kl_along_classes(tape, p, q),
        DivergenceKind::NeymanChi2 => {
            let d = tape.sub(p, q)?;
            let d2 = tape.mul(d, d)?;
            let r = tape.div(d2, p)?;
            over(tape, r)
        }
        DivergenceKind::JensenShannon => {
            let s = tape.add(p, q)?;
            let m = tape.mul_scalar(s, 0.5)?;
            let a = kl_along_classes(tape, p, m)?;
            let b = kl_along_classes(tape, q, m)?;
            let ab = tape.add(a, b)?;
            tape.mul_scalar(ab, 0.5)
        }
    }
}

fn kl_along_classes(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    let lp = tape.ln(p)?;
    let lq = tape.ln(q)?;
    let d = tape.sub(lp, lq)?;
    let w = tape.mul(p, d)?;
    tape.sum(w, &[0])
}

/// Mean over voxels of `Div(softmax(pred_logits) : label_probs)`, both
/// `[J, D, H, W]`, with the class distribution along axis 0.
pub fn voxel_divergence_loss(
    tape: &mut Tape,
    pred_logits: Var,
    label_probs: Var,
    kind: DivergenceKind,
    e: HolderExponents,
) -> Result<Var> {
    if tape.shape(pred_logits) != tape.shape(label_probs) {
        return Err(Error::shape(format!(
            "prediction {:?} and label {:?} shapes differ",
            tape.shape(pred_logits),
            tape.shape(label_probs)
        )));
    }
    let probs = tape.softmax(pred_logits, 0)?;
    let p = tape.clamp(probs, PROB_FLOOR, 1.0)?;
    let q = tape.clamp(label_probs, PROB_FLOOR, 1.0)?;
    let per_voxel = divergence_along_classes(tape, kind, p, q, e)?;
    tape.mean_all(per_voxel)
}
