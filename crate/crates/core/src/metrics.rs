//! Balanced accuracy and the tone-group fairness ratios.
//!
//! `EOM` averages, over classes, the ratio of the worst to the best
//! per-group true-positive rate. `PQD` is the ratio of the worst to the best
//! per-group balanced accuracy. Both are 1 for a perfectly even model.
//!
//! Conventions for degenerate inputs:
//! - a (class, group) cell with no true members is ABSENT (`None`), never 0;
//! - a class whose present cells are all 0 contributes 1 to EOM (equal failure);
//! - PQD with every present group at 0 balanced accuracy is 1.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-sample evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub label: usize,
    pub predicted: usize,
    /// One score per class; sums to 1.
    pub scores: Vec<f64>,
    /// Tone group id, already mapped to the configured grouping.
    pub group: u8,
    pub split: usize,
}

/// `cells[i][j]` is the true-positive rate of class `classes[i]` within
/// group `groups[j]`, or `None` when the group has no members of that class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TprTable {
    pub classes: Vec<usize>,
    pub groups: Vec<u8>,
    pub cells: Vec<Vec<Option<f64>>>,
    /// Denominators behind each cell.
    pub support: Vec<Vec<usize>>,
}

impl TprTable {
    pub fn get(&self, class: usize, group: u8) -> Option<f64> {
        let i = self.classes.iter().position(|&c| c == class)?;
        let j = self.groups.iter().position(|&g| g == group)?;
        self.cells[i][j]
    }

    /// Mark cells with fewer than `min_support` true members as absent.
    pub fn with_min_support(mut self, min_support: usize) -> Self {
        for (row, sup) in self.cells.iter_mut().zip(&self.support) {
            for (cell, &n) in row.iter_mut().zip(sup) {
                if n < min_support && cell.is_some() {
                    log::info!("excluding TPR cell with support {n} < {min_support}");
                    *cell = None;
                }
            }
        }
        self
    }
}

/// Classes seen in labels, groups seen anywhere.
pub fn tpr_table(predictions: &[PredictionRecord]) -> TprTable {
    let classes: Vec<usize> = predictions
        .iter()
        .flat_map(|p| [p.label, p.predicted])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let groups: Vec<u8> = predictions
        .iter()
        .map(|p| p.group)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut hits = vec![vec![0usize; groups.len()]; classes.len()];
    let mut support = vec![vec![0usize; groups.len()]; classes.len()];
    for p in predictions {
        let i = classes.binary_search(&p.label).expect("class listed");
        let j = groups.binary_search(&p.group).expect("group listed");
        support[i][j] += 1;
        if p.predicted == p.label {
            hits[i][j] += 1;
        }
    }
    let cells = hits
        .iter()
        .zip(&support)
        .map(|(h, s)| {
            h.iter()
                .zip(s)
                .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
                .collect()
        })
        .collect();
    TprTable {
        classes,
        groups,
        cells,
        support,
    }
}

/// Mean of per-class recalls over the classes present among true labels,
/// optionally restricted to one group. `None` when nothing is left.
pub fn balanced_accuracy(predictions: &[PredictionRecord], group: Option<u8>) -> Option<f64> {
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for p in predictions.iter().filter(|p| group.is_none_or(|g| p.group == g)) {
        let e = per_class.entry(p.label).or_default();
        e.1 += 1;
        if p.predicted == p.label {
            e.0 += 1;
        }
    }
    if per_class.is_empty() {
        return None;
    }
    let sum: f64 = per_class
        .values()
        .map(|&(hit, n)| hit as f64 / n as f64)
        .sum();
    Some(sum / per_class.len() as f64)
}

/// Balanced accuracy within each group; groups smaller than `min_support`
/// are reported as absent.
pub fn group_balanced_accuracy(
    predictions: &[PredictionRecord],
    min_support: usize,
) -> BTreeMap<u8, Option<f64>> {
    let mut sizes: BTreeMap<u8, usize> = BTreeMap::new();
    for p in predictions {
        *sizes.entry(p.group).or_default() += 1;
    }
    sizes
        .into_iter()
        .map(|(g, n)| {
            let ba = if n < min_support {
                None
            } else {
                balanced_accuracy(predictions, Some(g))
            };
            (g, ba)
        })
        .collect()
}

fn min_max_ratio(values: &[f64]) -> f64 {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == 0.0 {
        1.0
    } else {
        min / max
    }
}

pub fn compute_eom(table: &TprTable) -> Result<f64> {
    let mut ratios = Vec::with_capacity(table.classes.len());
    for (class, row) in table.classes.iter().zip(&table.cells) {
        let present: Vec<f64> = row.iter().flatten().copied().collect();
        if present.is_empty() {
            log::warn!("EOM: class {class} has no populated tone group; skipped");
            continue;
        }
        ratios.push(min_max_ratio(&present));
    }
    if ratios.is_empty() {
        return Err(Error::invalid("EOM undefined: no class has a populated tone group"));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

pub fn compute_pqd(group_ba: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = group_ba.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("PQD undefined: no group has a balanced accuracy"));
    }
    Ok(min_max_ratio(&present))
}

/// Mean and sample standard deviation of per-split values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// `None` with fewer than two values.
    pub std: Option<f64>,
    pub n: usize,
}

impl MeanStd {
    /// `0.80 ± 0.10`, or `0.80 ± —` when the spread is undefined.
    pub fn display(&self) -> String {
        match self.std {
            Some(s) => format!("{:.2} ± {:.2}", self.mean, s),
            None => format!("{:.2} ± —", self.mean),
        }
    }
}

pub fn aggregate_splits(values: &[f64]) -> Option<MeanStd> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n >= 2).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Some(MeanStd { mean, std, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToneGrouping {
    /// Six Fitzpatrick types.
    #[default]
    Fine,
    /// I–III versus IV–VI.
    Coarse,
}

impl ToneGrouping {
    /// Group id of a Fitzpatrick type (1..=6).
    pub fn group(self, tone: u8) -> u8 {
        match self {
            ToneGrouping::Fine => tone,
            ToneGrouping::Coarse => {
                if tone <= 3 {
                    1
                } else {
                    2
                }
            }
        }
    }

    pub fn num_groups(self) -> usize {
        match self {
            ToneGrouping::Fine => 6,
            ToneGrouping::Coarse => 2,
        }
    }

    pub fn label(self, group: u8) -> String {
        match self {
            ToneGrouping::Fine => ["I", "II", "III", "IV", "V", "VI"]
                .get(usize::from(group.saturating_sub(1)))
                .map_or_else(|| group.to_string(), |s| s.to_string()),
            ToneGrouping::Coarse => match group {
                1 => "I-III".into(),
                2 => "IV-VI".into(),
                g => g.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    /// Score threshold for the positive class in binary tasks.
    pub threshold: f64,
    pub grouping: ToneGrouping,
    /// Cells and groups with fewer true members are treated as absent.
    pub min_group_support: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            grouping: ToneGrouping::Fine,
            min_group_support: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub n: usize,
    pub tpr: TprTable,
    pub group_balanced_accuracy: BTreeMap<u8, Option<f64>>,
    pub balanced_accuracy: Option<f64>,
    pub eom: Option<f64>,
    pub pqd: Option<f64>,
}

pub fn fairness_report(predictions: &[PredictionRecord], options: &MetricOptions) -> FairnessReport {
    let tpr = tpr_table(predictions).with_min_support(options.min_group_support);
    let group_ba = group_balanced_accuracy(predictions, options.min_group_support);
    let ba_values: Vec<Option<f64>> = group_ba.values().copied().collect();
    FairnessReport {
        n: predictions.len(),
        eom: compute_eom(&tpr).ok(),
        pqd: compute_pqd(&ba_values).ok(),
        balanced_accuracy: balanced_accuracy(predictions, None),
        group_balanced_accuracy: group_ba,
        tpr,
    }
}
