use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Condition, ImageRecord, Source};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToneTableRow {
    pub source: Source,
    pub condition: Condition,
    /// Counts for Fitzpatrick types I..VI.
    pub counts: [u64; 6],
}

impl ToneTableRow {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Counts by (source, condition, tone), laid out like the dataset summary
/// table: one row per observed (source, condition), one column per tone.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToneTable {
    pub rows: Vec<ToneTableRow>,
}

impl ToneTable {
    /// Column sums over all rows.
    pub fn column_totals(&self) -> [u64; 6] {
        let mut out = [0u64; 6];
        for row in &self.rows {
            for (o, c) in out.iter_mut().zip(row.counts) {
                *o += c;
            }
        }
        out
    }

    pub fn grand_total(&self) -> u64 {
        self.rows.iter().map(ToneTableRow::total).sum()
    }

    pub fn row(&self, source: Source, condition: Condition) -> Option<&ToneTableRow> {
        self.rows
            .iter()
            .find(|r| r.source == source && r.condition == condition)
    }

    /// Comma-separated rendering: `Dataset,Lesion,I..VI,Total`, one line per
    /// row and a closing `All` line with column totals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Dataset,Lesion,I,II,III,IV,V,VI,Total\n");
        let line = |out: &mut String, a: &str, b: &str, counts: [u64; 6]| {
            let cells: Vec<String> = counts.iter().map(u64::to_string).collect();
            let total: u64 = counts.iter().sum();
            let _ = writeln!(out, "{a},{b},{},{total}", cells.join(","));
        };
        for row in &self.rows {
            let lesion = title_case(row.condition.name());
            line(&mut out, row.source.name(), &lesion, row.counts);
        }
        line(&mut out, "All", "All", self.column_totals());
        out
    }
}

fn title_case(s: &str) -> String {
    let lower = s.to_lowercase();
    let mut chars = lower.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

pub fn tone_distribution_table(records: &[ImageRecord]) -> ToneTable {
    let mut cells: BTreeMap<(Source, Condition), [u64; 6]> = BTreeMap::new();
    for r in records {
        cells.entry((r.source, r.condition)).or_default()[usize::from(r.tone.get() - 1)] += 1;
    }
    ToneTable {
        rows: cells
            .into_iter()
            .map(|((source, condition), counts)| ToneTableRow {
                source,
                condition,
                counts,
            })
            .collect(),
    }
}
