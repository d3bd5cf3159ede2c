//! Per-split report files, aggregation over splits, and table rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{aggregate_splits, FairnessReport, MeanStd, MetricOptions};
use crate::models::Variant;

/// Which test set a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Held-out partition of the training source.
    Internal,
    /// A different dataset.
    External,
}

impl Scope {
    pub const ALL: [Scope; 2] = [Scope::Internal, Scope::External];

    pub fn key(self) -> &'static str {
        match self {
            Scope::Internal => "internal",
            Scope::External => "external",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Scope::Internal => "Internal",
            Scope::External => "External",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Eom,
    Pqd,
    BalancedAccuracy,
    ToneProbe,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Eom, Metric::Pqd, Metric::BalancedAccuracy, Metric::ToneProbe];

    pub fn key(self) -> &'static str {
        match self {
            Metric::Eom => "eom",
            Metric::Pqd => "pqd",
            Metric::BalancedAccuracy => "balanced_accuracy",
            Metric::ToneProbe => "tone_probe",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Metric::Eom => "EOM",
            Metric::Pqd => "PQD",
            Metric::BalancedAccuracy => "Balanced accuracy",
            Metric::ToneProbe => "Tone probe accuracy",
        }
    }

    /// Whether a larger value is better (used to pick the bold cell).
    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::ToneProbe)
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "eom" => Ok(Metric::Eom),
            "pqd" => Ok(Metric::Pqd),
            "ba" | "balanced_accuracy" => Ok(Metric::BalancedAccuracy),
            "tone_probe" | "probe" => Ok(Metric::ToneProbe),
            other => Err(Error::config(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub accuracy: f64,
    pub chance: f64,
}

/// The persisted result of evaluating one sub-run on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub variant: Variant,
    pub backbone: String,
    /// Position of the backbone in the experiment; orders table columns.
    pub backbone_index: usize,
    pub split: usize,
    pub scope: Scope,
    pub options: MetricOptions,
    pub report: FairnessReport,
    #[serde(default)]
    pub tone_probe: Option<ProbeSummary>,
}

impl SplitReport {
    pub fn value(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Eom => self.report.eom,
            Metric::Pqd => self.report.pqd,
            Metric::BalancedAccuracy => self.report.balanced_accuracy,
            Metric::ToneProbe => self.tone_probe.map(|p| p.accuracy),
        }
    }

    pub fn file_name(scope: Scope) -> String {
        format!("report_{}.json", scope.key())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(Self::file_name(self.scope));
        write_text(&path, &serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// Every `report_*.json` below `results/runs`, ordered by variant,
/// backbone, split and scope.
pub fn read_split_reports(results: &Path) -> Result<Vec<SplitReport>> {
    let runs = results.join("runs");
    let mut reports = Vec::new();
    if !runs.is_dir() {
        return Ok(reports);
    }
    for cell in sorted_dir(&runs)? {
        if !cell.is_dir() {
            continue;
        }
        for split in sorted_dir(&cell)? {
            for scope in Scope::ALL {
                let path = split.join(SplitReport::file_name(scope));
                if path.is_file() {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    reports.push(serde_json::from_str(&text)?);
                }
            }
        }
    }
    reports.sort_by(|a: &SplitReport, b: &SplitReport| {
        (variant_rank(a.variant), a.backbone_index, &a.backbone, a.split, a.scope).cmp(&(
            variant_rank(b.variant),
            b.backbone_index,
            &b.backbone,
            b.split,
            b.scope,
        ))
    });
    Ok(reports)
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn variant_rank(v: Variant) -> usize {
    Variant::ALL.iter().position(|&x| x == v).unwrap_or(usize::MAX)
}

/// Per-split values of one (variant, backbone, scope) cell and their
/// mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: Variant,
    pub backbone: String,
    pub backbone_index: usize,
    pub scope: Scope,
    pub splits: Vec<usize>,
    pub values: BTreeMap<Metric, Vec<f64>>,
    pub summary: BTreeMap<Metric, MeanStd>,
}

impl AggregateRow {
    pub fn get(&self, metric: Metric) -> Option<MeanStd> {
        self.summary.get(&metric).copied()
    }
}

/// Group split reports by (variant, backbone, scope). Splits where a metric
/// is undefined do not contribute to that metric.
pub fn aggregate(reports: &[SplitReport]) -> Vec<AggregateRow> {
    let mut rows: Vec<AggregateRow> = Vec::new();
    for r in reports {
        let pos = rows
            .iter()
            .position(|a| a.variant == r.variant && a.backbone == r.backbone && a.scope == r.scope);
        let row = match pos {
            Some(i) => &mut rows[i],
            None => {
                rows.push(AggregateRow {
                    variant: r.variant,
                    backbone: r.backbone.clone(),
                    backbone_index: r.backbone_index,
                    scope: r.scope,
                    splits: Vec::new(),
                    values: BTreeMap::new(),
                    summary: BTreeMap::new(),
                });
                rows.last_mut().expect("just pushed")
            }
        };
        row.splits.push(r.split);
        for m in Metric::ALL {
            if let Some(v) = r.value(m) {
                row.values.entry(m).or_default().push(v);
            }
        }
    }
    for row in &mut rows {
        row.summary = row
            .values
            .iter()
            .filter_map(|(&m, v)| aggregate_splits(v).map(|s| (m, s)))
            .collect();
    }
    rows.sort_by(|a, b| {
        (variant_rank(a.variant), a.backbone_index, &a.backbone, a.scope).cmp(&(
            variant_rank(b.variant),
            b.backbone_index,
            &b.backbone,
            b.scope,
        ))
    });
    rows
}

pub const AGGREGATE_FILE: &str = "aggregate.json";

pub fn save_aggregate(rows: &[AggregateRow], results: &Path) -> Result<PathBuf> {
    let path = results.join(AGGREGATE_FILE);
    write_text(&path, &serde_json::to_string_pretty(rows)?)?;
    Ok(path)
}

pub fn load_aggregate(results: &Path) -> Result<Vec<AggregateRow>> {
    let path = results.join(AGGREGATE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Markdown table with one row per variant and one column per
/// (backbone, scope). Cells read `mean ± std`; the best mean of each
/// column is bold and missing cells show `—`.
pub fn render_table(rows: &[AggregateRow], metric: Metric) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("no aggregated results to tabulate"));
    }
    let mut variants: Vec<Variant> = Vec::new();
    let mut backbones: Vec<(usize, String)> = Vec::new();
    let mut scopes: Vec<Scope> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant) {
            variants.push(r.variant);
        }
        let b = (r.backbone_index, r.backbone.clone());
        if !backbones.contains(&b) {
            backbones.push(b);
        }
        if !scopes.contains(&r.scope) {
            scopes.push(r.scope);
        }
    }
    variants.sort_by_key(|&v| variant_rank(v));
    backbones.sort();
    scopes.sort();

    let columns: Vec<(&str, Scope)> = backbones
        .iter()
        .flat_map(|(_, b)| scopes.iter().map(move |&s| (b.as_str(), s)))
        .collect();
    let cell = |v: Variant, (b, s): (&str, Scope)| {
        rows.iter()
            .find(|r| r.variant == v && r.backbone == b && r.scope == s)
            .and_then(|r| r.get(metric))
    };
    let best: Vec<Option<f64>> = columns
        .iter()
        .map(|&c| {
            let means = variants.iter().filter_map(|&v| cell(v, c)).map(|m| m.mean);
            if metric.higher_is_better() {
                means.fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.max(m))))
            } else {
                means.fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.min(m))))
            }
        })
        .collect();

    let mut out = String::new();
    let _ = write!(out, "| Model |");
    for (b, s) in &columns {
        let _ = write!(out, " {b} {} |", s.title());
    }
    out.push('\n');
    out.push_str("| --- |");
    for _ in &columns {
        out.push_str(" --- |");
    }
    out.push('\n');
    for &v in &variants {
        let _ = write!(out, "| {} |", v.display_name());
        for (c, best) in columns.iter().zip(&best) {
            let text = match cell(v, *c) {
                None => "—".to_string(),
                Some(m) if Some(m.mean) == *best => format!("**{}**", m.display()),
                Some(m) => m.display(),
            };
            let _ = write!(out, " {text} |");
        }
        out.push('\n');
    }
    Ok(out)
}
