use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModalityMask;
use crate::segloss::Region;

/// Mean test DSC of one modality subset, as fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    pub subset: String,
    pub bits: u8,
    pub wt: f64,
    pub tc: f64,
    pub et: f64,
}

impl SubsetRow {
    pub fn get(&self, r: Region) -> f64 {
        match r {
            Region::WholeTumor => self.wt,
            Region::TumorCore => self.tc,
            Region::EnhancingTumor => self.et,
        }
    }

    pub fn mean(&self) -> f64 {
        (self.wt + self.tc + self.et) / 3.0
    }

    pub fn mask(&self) -> Result<ModalityMask> {
        ModalityMask::from_bits(self.bits)
    }
}

/// Per-subset DSC table of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub method: String,
    pub rows: Vec<SubsetRow>,
    /// Count of (sample, subset) evaluations where the region was empty in
    /// both prediction and ground truth and scored 1.0 by convention, per
    /// WT, TC, ET.
    pub both_empty: [usize; 3],
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl DiceReport {
    /// Rows must cover the 15 subsets in reporting order with DSC in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let order = ModalityMask::table_order();
        if self.rows.len() != order.len() {
            return Err(Error::parse(format!(
                "report has {} rows, expected 15",
                self.rows.len()
            )));
        }
        for (row, mask) in self.rows.iter().zip(order) {
            if row.bits != mask.bits() || row.subset != mask.label() {
                return Err(Error::parse(format!(
                    "row {} out of order, expected {}",
                    row.subset,
                    mask.label()
                )));
            }
            for r in Region::ALL {
                let v = row.get(r);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::parse(format!(
                        "{} {} = {v} outside [0, 1]",
                        row.subset,
                        r.short_name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn region_average(&self, r: Region) -> f64 {
        mean(self.rows.iter().map(|row| row.get(r)))
    }

    /// Mean of the three region averages.
    pub fn grand_average(&self) -> f64 {
        mean(Region::ALL.iter().map(|&r| self.region_average(r)))
    }

    /// Grand average over the subsets missing exactly `missing` modalities.
    pub fn missing_average(&self, missing: usize) -> Option<f64> {
        let rows: Vec<&SubsetRow> = self
            .rows
            .iter()
            .filter(|r| r.mask().is_ok_and(|m| m.missing() == missing))
            .collect();
        (!rows.is_empty()).then(|| mean(rows.iter().map(|r| r.mean())))
    }

    /// Mean single-modality grand DSC.
    pub fn single_modality_average(&self) -> Option<f64> {
        self.missing_average(3)
    }

    pub fn full_modality(&self) -> Option<f64> {
        self.missing_average(0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: DiceReport = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
        r.validate()?;
        Ok(r)
    }
}

/// Quotes a CSV field that contains a comma or quote.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Percentage with one decimal.
pub fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

/// `subset,WT,TC,ET`, the 15 rows, then `avg`.
pub fn emit_csv(report: &DiceReport) -> String {
    let mut out = String::from("subset,WT,TC,ET\n");
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            csv_field(&row.subset),
            pct(row.wt),
            pct(row.tc),
            pct(row.et)
        );
    }
    let avg: Vec<String> = Region::ALL.iter().map(|&r| pct(report.region_average(r))).collect();
    let _ = writeln!(out, "avg,{}", avg.join(","));
    out
}

/// Markdown version of [`emit_csv`]. With several reports the rows are
/// grouped by subset and the best value of each region within a group is
/// starred.
pub fn emit_markdown(reports: &[DiceReport]) -> String {
    let mut out = String::new();
    if let [single] = reports {
        out.push_str("| subset | WT | TC | ET |\n|---|---:|---:|---:|\n");
        for row in &single.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                row.subset,
                pct(row.wt),
                pct(row.tc),
                pct(row.et)
            );
        }
        let avg: Vec<String> = Region::ALL.iter().map(|&r| pct(single.region_average(r))).collect();
        let _ = writeln!(out, "| avg | {} |", avg.join(" | "));
        return out;
    }
    out.push_str("| subset | method | WT | TC | ET |\n|---|---|---:|---:|---:|\n");
    let n_rows = reports.iter().map(|r| r.rows.len()).min().unwrap_or(0);
    let mut groups: Vec<(String, Vec<[f64; 3]>)> = (0..n_rows)
        .map(|i| {
            let vals = reports.iter().map(|r| Region::ALL.map(|g| r.rows[i].get(g))).collect();
            (reports[0].rows[i].subset.clone(), vals)
        })
        .collect();
    groups.push((
        "avg".into(),
        reports
            .iter()
            .map(|r| Region::ALL.map(|g| r.region_average(g)))
            .collect(),
    ));
    for (subset, vals) in groups {
        let cells = starred_cells(&vals);
        for (report, row) in reports.iter().zip(cells) {
            let _ = writeln!(out, "| {subset} | {} | {} |", report.method, row.join(" | "));
        }
    }
    out
}

/// Formats `values[method][column]` as percentages, starring the maximum of
/// each column after rounding (ties all starred).
pub fn starred_cells<const N: usize>(values: &[[f64; N]]) -> Vec<Vec<String>> {
    let text: Vec<Vec<String>> = values.iter().map(|row| row.iter().map(|&v| pct(v)).collect()).collect();
    let mut out = text.clone();
    if values.len() < 2 {
        return out;
    }
    for c in 0..N {
        let best = text
            .iter()
            .map(|row| row[c].parse::<f64>().unwrap_or(f64::NEG_INFINITY))
            .fold(f64::NEG_INFINITY, f64::max);
        for (r, row) in text.iter().enumerate() {
            if row[c].parse::<f64>().ok() == Some(best) {
                out[r][c] = format!("*{}*", row[c]);
            }
        }
    }
    out
}
