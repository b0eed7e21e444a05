use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::divergence::{DivergenceKind, HolderExponents};
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::phantom::{DEFAULT_DIMS, MIN_EXTENT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding `train/` and `test/`.
    pub root: String,
    pub n_train: usize,
    pub n_test: usize,
    pub dims: [usize; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: "data".into(),
            n_train: 40,
            n_test: 10,
            dims: DEFAULT_DIMS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Everything that determines a training run. Deserialized from JSON; any
/// omitted field takes its default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub alpha: f64,
    pub divergence: DivergenceKind,
    pub lambda_mi: f64,
    pub lambda_hd: f64,
    /// Per-level MI weights; `k / K` when absent.
    pub gamma: Option<Vec<f64>>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataConfig::default(),
            arch: ArchConfig::default(),
            alpha: 1.1,
            divergence: DivergenceKind::Holder,
            lambda_mi: 1.0,
            lambda_hd: 1.0,
            gamma: None,
            learning_rate: 8e-4,
            weight_decay: 1e-5,
            epochs: 60,
            batch_size: 4,
            adam: AdamConfig::default(),
            label_smoothing: 0.05,
            out_dir: "runs".into(),
        }
    }
}

fn finite_nonneg(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::config(format!(
            "{name} must be finite and non-negative, got {v}"
        )));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.exponents()?;
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        finite_nonneg("weight decay", self.weight_decay)?;
        finite_nonneg("lambda_mi", self.lambda_mi)?;
        finite_nonneg("lambda_hd", self.lambda_hd)?;
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps.is_nan() || eps <= 0.0 {
            return Err(Error::config(format!("invalid Adam settings {:?}", self.adam)));
        }
        if let Some(g) = &self.gamma {
            if g.len() != self.arch.levels() {
                return Err(Error::config(format!(
                    "gamma has {} entries for {} levels",
                    g.len(),
                    self.arch.levels()
                )));
            }
            for &v in g {
                finite_nonneg("gamma", v)?;
            }
        }
        if self.data.n_train < 1 || self.data.n_test < 1 {
            return Err(Error::config("each split needs at least one sample"));
        }
        let scale = 1usize << (self.arch.levels() - 1);
        for &d in &self.data.dims {
            if d < MIN_EXTENT || d % scale != 0 {
                return Err(Error::config(format!(
                    "volume extent {d} must be at least {MIN_EXTENT} and divisible by {scale}"
                )));
            }
        }
        Ok(())
    }

    pub fn exponents(&self) -> Result<HolderExponents> {
        HolderExponents::new(self.alpha).map_err(|e| Error::config(e.to_string()))
    }

    pub fn gammas(&self) -> Result<Vec<f64>> {
        match &self.gamma {
            Some(g) => Ok(g.clone()),
            None => crate::distill::gamma_schedule(self.arch.levels()),
        }
    }
}
