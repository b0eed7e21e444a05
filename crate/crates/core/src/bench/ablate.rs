use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::config::ExperimentConfig;
use crate::bench::eval::{evaluate_subsets, with_jobs};
use crate::bench::report::{pct, starred_cells, DiceReport};
use crate::bench::train::train;
use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::phantom::Sample;
use crate::segloss::Region;

pub const ALPHA_SWEEP: [f64; 5] = [1.05, 1.08, 1.10, 1.15, 1.20];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    DivergenceFamily,
    AlphaSweep,
    LossComponents,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [
        AblationAxis::DivergenceFamily,
        AblationAxis::AlphaSweep,
        AblationAxis::LossComponents,
    ];

    pub fn key(self) -> &'static str {
        match self {
            AblationAxis::DivergenceFamily => "divergence_family",
            AblationAxis::AlphaSweep => "alpha_sweep",
            AblationAxis::LossComponents => "loss_components",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.key() == s.replace('-', "_"))
            .ok_or_else(|| Error::config(format!("unknown ablation axis `{s}`")))
    }
}

/// One row of an ablation: the settings that differ from the base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub divergence: DivergenceKind,
    pub alpha: f64,
    pub lambda_mi: f64,
    pub lambda_hd: f64,
}

impl Variant {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        ExperimentConfig {
            divergence: self.divergence,
            alpha: self.alpha,
            lambda_mi: self.lambda_mi,
            lambda_hd: self.lambda_hd,
            ..base.clone()
        }
    }
}

/// Variants of `axis` in table order.
pub fn variants(axis: AblationAxis, base: &ExperimentConfig) -> Vec<Variant> {
    let v = |label: String, divergence, alpha, lambda_mi, lambda_hd| Variant {
        label,
        divergence,
        alpha,
        lambda_mi,
        lambda_hd,
    };
    match axis {
        AblationAxis::DivergenceFamily => DivergenceKind::TABLE_ORDER
            .iter()
            .map(|&k| v(k.label().into(), k, base.alpha, base.lambda_mi, base.lambda_hd))
            .collect(),
        AblationAxis::AlphaSweep => ALPHA_SWEEP
            .iter()
            .map(|&a| {
                v(
                    DivergenceKind::Holder.label().into(),
                    DivergenceKind::Holder,
                    a,
                    base.lambda_mi,
                    base.lambda_hd,
                )
            })
            .collect(),
        AblationAxis::LossComponents => [
            ("dice", 0.0, 0.0),
            ("dice+MI", base.lambda_mi, 0.0),
            ("dice+HD", 0.0, base.lambda_hd),
            ("dice+MI+HD", base.lambda_mi, base.lambda_hd),
        ]
        .into_iter()
        .map(|(l, mi, hd)| v(l.into(), base.divergence, base.alpha, mi, hd))
        .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub report: DiceReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub seed: u64,
    pub results: Vec<VariantResult>,
}

/// Trains and evaluates every variant of `axis` from the same seed and data.
/// Variants fan out over `jobs` workers; results keep table order.
pub fn ablate(
    base: &ExperimentConfig,
    axis: AblationAxis,
    train_set: &[Sample],
    test_set: &[Sample],
    jobs: usize,
) -> Result<AblationReport> {
    base.validate()?;
    let list = variants(axis, base);
    let results: Vec<Result<VariantResult>> = with_jobs(jobs, || {
        list.par_iter()
            .map(|variant| {
                let cfg = variant.apply(base);
                let trained = train(&cfg, train_set)?;
                let report = evaluate_subsets(&variant.label, &trained.params, test_set, 1)?;
                Ok(VariantResult {
                    variant: variant.clone(),
                    report,
                })
            })
            .collect()
    })?;
    Ok(AblationReport {
        axis,
        seed: base.seed,
        results: results.into_iter().collect::<Result<_>>()?,
    })
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "×"
    }
}

/// Label cells and numeric cells of one table row.
type Row = (Vec<String>, Vec<f64>);

impl AblationReport {
    /// Header plus one row of label cells and one row of numeric values per
    /// variant.
    fn table(&self) -> (Vec<&'static str>, Vec<Row>) {
        let regions = |r: &DiceReport| -> Vec<f64> {
            let mut v: Vec<f64> = Region::ALL.iter().map(|&g| r.region_average(g)).collect();
            v.push(r.grand_average());
            v
        };
        match self.axis {
            AblationAxis::DivergenceFamily => (
                vec!["method", "WT", "TC", "ET", "Avg"],
                self.results
                    .iter()
                    .map(|r| (vec![r.variant.label.clone()], regions(&r.report)))
                    .collect(),
            ),
            AblationAxis::AlphaSweep => (
                vec!["divergence", "alpha", "WT", "TC", "ET", "Avg"],
                self.results
                    .iter()
                    .map(|r| {
                        (
                            vec![r.variant.label.clone(), format!("{:.2}", r.variant.alpha)],
                            regions(&r.report),
                        )
                    })
                    .collect(),
            ),
            AblationAxis::LossComponents => (
                vec!["dice", "MI", "HD", "3", "2", "1", "0", "Avg"],
                self.results
                    .iter()
                    .map(|r| {
                        let v = &r.variant;
                        let labels = vec![
                            mark(true).to_string(),
                            mark(v.lambda_mi != 0.0).to_string(),
                            mark(v.lambda_hd != 0.0).to_string(),
                        ];
                        let mut vals: Vec<f64> = (0..4)
                            .rev()
                            .map(|m| r.report.missing_average(m).unwrap_or(f64::NAN))
                            .collect();
                        vals.push(r.report.grand_average());
                        (labels, vals)
                    })
                    .collect(),
            ),
        }
    }

    pub fn emit_csv(&self) -> String {
        let (header, rows) = self.table();
        let mut out = header.join(",");
        out.push('\n');
        for (labels, vals) in rows {
            let cells: Vec<String> = labels.into_iter().chain(vals.iter().map(|&v| pct(v))).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    /// Markdown table with the best value of every numeric column starred.
    pub fn emit_markdown(&self) -> String {
        let (header, rows) = self.table();
        let n_labels = rows.first().map_or(0, |r| r.0.len());
        let mut out = format!("| {} |\n|", header.join(" | "));
        for i in 0..header.len() {
            out.push_str(if i < n_labels { "---|" } else { "---:|" });
        }
        out.push('\n');
        let cells = starred_dyn(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>());
        for ((labels, _), nums) in rows.iter().zip(cells) {
            let _ = writeln!(out, "| {} | {} |", labels.join(" | "), nums.join(" | "));
        }
        out
    }

    pub fn grand_averages(&self) -> Vec<(String, f64)> {
        self.results
            .iter()
            .map(|r| (r.variant.label.clone(), r.report.grand_average()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: AblationReport = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
        for v in &r.results {
            v.report.validate()?;
        }
        Ok(r)
    }
}

fn starred_dyn(values: &[Vec<f64>]) -> Vec<Vec<String>> {
    let width = values.first().map_or(0, Vec::len);
    let mut out: Vec<Vec<String>> = values.iter().map(|_| Vec::with_capacity(width)).collect();
    for c in 0..width {
        let col: Vec<[f64; 1]> = values.iter().map(|row| [row[c]]).collect();
        for (o, cell) in out.iter_mut().zip(starred_cells(&col)) {
            o.push(cell[0].clone());
        }
    }
    out
}
