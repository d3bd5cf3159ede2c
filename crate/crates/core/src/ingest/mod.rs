//! Dataset ingestion: manifest schemas, diagnosis harmonization, tone
//! normalization, and image preprocessing.

mod mapping;
mod preprocess;
mod tone_table;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use mapping::{
    harmonize_diagnosis, normalize_diagnosis, CollapseRule, DiagnosisMapping, MappedClass,
};
pub use preprocess::{
    preprocess_image, preprocess_rgb, AugmentSpec, Normalization, PixelTensor, PreprocessSpec,
    IMAGE_SIZE,
};
pub use tone_table::{tone_distribution_table, ToneTable, ToneTableRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Condition {
    Malignant,
    Benign,
    Eczema,
    Psoriasis,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Malignant,
        Condition::Benign,
        Condition::Eczema,
        Condition::Psoriasis,
    ];

    pub fn is_neoplastic(self) -> bool {
        matches!(self, Condition::Malignant | Condition::Benign)
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::Malignant => "MALIGNANT",
            Condition::Benign => "BENIGN",
            Condition::Eczema => "ECZEMA",
            Condition::Psoriasis => "PSORIASIS",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MALIGNANT" => Ok(Condition::Malignant),
            "BENIGN" => Ok(Condition::Benign),
            "ECZEMA" => Ok(Condition::Eczema),
            "PSORIASIS" => Ok(Condition::Psoriasis),
            other => Err(Error::invalid(format!("unknown condition {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Fitzpatrick17k,
    #[serde(alias = "pad-ufes", alias = "pad_ufes")]
    PadUfes,
    Scin,
    Synthetic,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Fitzpatrick17k => "Fitzpatrick17k",
            Source::PadUfes => "PADUFES",
            Source::Scin => "SCIN",
            Source::Synthetic => "SYNTHETIC",
        }
    }

    /// Column names that must be present in this source's metadata file.
    pub fn required_columns(self) -> &'static [&'static str] {
        match self {
            Source::Fitzpatrick17k => &["md5hash", "label", "fitzpatrick_scale"],
            Source::PadUfes => &["img_id", "diagnostic", "fitspatrick"],
            Source::Scin => &[
                "case_id",
                "dermatologist_skin_condition_on_label_name",
                "image_1_path",
            ],
            Source::Synthetic => &["image_id", "image_path", "label", "fitzpatrick_scale"],
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fitzpatrick17k" => Ok(Source::Fitzpatrick17k),
            "padufes" => Ok(Source::PadUfes),
            "scin" => Ok(Source::Scin),
            "synthetic" => Ok(Source::Synthetic),
            other => Err(Error::config(format!("unknown dataset source {other:?}"))),
        }
    }
}

/// A binary classification task. Label 1 is the second condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Malignant versus benign lesions.
    Cancer,
    /// Psoriasis versus eczema.
    Inflammatory,
}

impl Task {
    pub fn conditions(self) -> [Condition; 2] {
        match self {
            Task::Cancer => [Condition::Benign, Condition::Malignant],
            Task::Inflammatory => [Condition::Eczema, Condition::Psoriasis],
        }
    }

    /// Class index of `condition`, or `None` when it belongs to the other task.
    pub fn label_of(self, condition: Condition) -> Option<usize> {
        self.conditions().iter().position(|&c| c == condition)
    }

    /// The dataset reserved for external testing of this task.
    pub fn external_source(self) -> Source {
        match self {
            Task::Cancer => Source::PadUfes,
            Task::Inflammatory => Source::Scin,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Cancer => "cancer",
            Task::Inflammatory => "inflammatory",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cancer" => Ok(Task::Cancer),
            "inflammatory" => Ok(Task::Inflammatory),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }
}

/// Fitzpatrick skin type, I (lightest) to VI (darkest).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Tone(u8);

impl Tone {
    pub const ALL: [Tone; 6] = [Tone(1), Tone(2), Tone(3), Tone(4), Tone(5), Tone(6)];

    pub fn new(value: u8) -> Option<Self> {
        (1..=6).contains(&value).then_some(Tone(value))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn roman(self) -> &'static str {
        ["I", "II", "III", "IV", "V", "VI"][usize::from(self.0 - 1)]
    }

    /// Parse the tone encodings used by the supported sources: integers
    /// (`3`, `3.0`), SCIN's `FST3`, and Roman numerals. `None` for anything
    /// outside I..VI, including Fitzpatrick17k's `-1`.
    pub fn parse_label(raw: &str) -> Option<Self> {
        let s = raw.trim();
        let s = s
            .strip_prefix("FST")
            .or_else(|| s.strip_prefix("fst"))
            .unwrap_or(s);
        if let Ok(v) = s.parse::<f64>() {
            if v.fract() == 0.0 && (1.0..=6.0).contains(&v) {
                return Tone::new(v as u8);
            }
            return None;
        }
        Tone::ALL.into_iter().find(|t| t.roman().eq_ignore_ascii_case(s))
    }
}

impl TryFrom<u8> for Tone {
    type Error = String;

    fn try_from(value: u8) -> std::result::Result<Self, Self::Error> {
        Tone::new(value).ok_or_else(|| format!("tone {value} outside 1..=6"))
    }
}

impl From<Tone> for u8 {
    fn from(t: Tone) -> u8 {
        t.0
    }
}

impl fmt::Display for Tone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.roman())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub image_path: PathBuf,
    pub raw_diagnosis: String,
    pub condition: Condition,
    pub tone: Tone,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    UnknownTone,
    ExcludedCondition,
    MissingImage,
    NoConditionLabel,
    DuplicateImage,
    UnreadableImage,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::UnknownTone => "unknown tone",
            RejectReason::ExcludedCondition => "excluded condition",
            RejectReason::MissingImage => "missing image file",
            RejectReason::NoConditionLabel => "no condition label",
            RejectReason::DuplicateImage => "duplicate image",
            RejectReason::UnreadableImage => "unreadable image",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// Zero-based data row (header excluded).
    pub row: usize,
    pub image_id: String,
    pub reason: RejectReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Directory against which image file names are resolved.
    pub images_dir: PathBuf,
    /// Reject rows whose image bytes duplicate an earlier row.
    pub dedup: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<ImageRecord>,
    pub rejections: Vec<Rejection>,
    /// Number of data rows read from the manifest.
    pub rows: usize,
}

impl Ingested {
    /// Write the rejection log as JSON lines.
    pub fn write_rejections(&self, path: &Path) -> Result<()> {
        let mut out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.rejections {
            let line = serde_json::to_string(r)?;
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn write_records(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image_id", "image_path", "raw_diagnosis", "condition", "tone", "source"])?;
        for r in &self.records {
            w.write_record([
                r.image_id.as_str(),
                &r.image_path.to_string_lossy(),
                &r.raw_diagnosis,
                r.condition.name(),
                &r.tone.get().to_string(),
                r.source.name(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// One manifest row after schema-specific field extraction.
struct RawRow {
    image_id: String,
    image_file: PathBuf,
    diagnosis: Option<String>,
    tone: Option<Tone>,
    tone_raw: String,
}

/// Load one dataset's metadata file into validated records.
pub fn load_manifest(
    source: Source,
    metadata_path: &Path,
    mapping: &DiagnosisMapping,
    options: &IngestOptions,
) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(metadata_path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(
                metadata_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            ),
            _ => Error::Csv(e),
        })?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);

    let mut missing: Vec<String> = source
        .required_columns()
        .iter()
        .filter(|c| column(c).is_none())
        .map(|c| c.to_string())
        .collect();
    let scin_rater_columns: Vec<usize> = (1..=3)
        .filter_map(|i| column(&format!("dermatologist_fitzpatrick_skin_type_label_{i}")))
        .collect();
    if source == Source::Scin
        && column("fitzpatrick_skin_type").is_none()
        && scin_rater_columns.is_empty()
    {
        missing.push("fitzpatrick_skin_type".into());
    }
    if !missing.is_empty() {
        return Err(Error::Schema {
            source_name: source.name().into(),
            path: metadata_path.to_path_buf(),
            missing,
        });
    }

    let manifest_dir = metadata_path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for result in reader.records() {
        let rec = result?;
        let field = |name: &str| column(name).and_then(|i| rec.get(i)).unwrap_or("").trim();
        let row = match source {
            Source::Fitzpatrick17k => {
                let id = field("md5hash").to_string();
                RawRow {
                    image_file: resolve_image(&options.images_dir, &id),
                    diagnosis: Some(field("label").to_string()),
                    tone: Tone::parse_label(field("fitzpatrick_scale")),
                    tone_raw: field("fitzpatrick_scale").to_string(),
                    image_id: id,
                }
            }
            Source::PadUfes => {
                let id = field("img_id").to_string();
                RawRow {
                    image_file: options.images_dir.join(&id),
                    diagnosis: Some(field("diagnostic").to_string()),
                    tone: Tone::parse_label(field("fitspatrick")),
                    tone_raw: field("fitspatrick").to_string(),
                    image_id: id,
                }
            }
            Source::Scin => {
                let (tone, tone_raw) = if column("fitzpatrick_skin_type").is_some() {
                    let raw = field("fitzpatrick_skin_type");
                    (Tone::parse_label(raw), raw.to_string())
                } else {
                    let labels: Vec<&str> = scin_rater_columns
                        .iter()
                        .filter_map(|&i| rec.get(i))
                        .collect();
                    (scin_consensus_tone(&labels), labels.join("|"))
                };
                RawRow {
                    image_id: field("case_id").to_string(),
                    image_file: options.images_dir.join(field("image_1_path")),
                    diagnosis: scin_condition(
                        field("dermatologist_skin_condition_on_label_name"),
                        column("weighted_skin_condition_label")
                            .and_then(|i| rec.get(i))
                            .unwrap_or(""),
                        mapping.collapse_rule(),
                    ),
                    tone,
                    tone_raw,
                }
            }
            Source::Synthetic => {
                let path = PathBuf::from(field("image_path"));
                let base = if options.images_dir.as_os_str().is_empty() {
                    manifest_dir
                } else {
                    options.images_dir.as_path()
                };
                RawRow {
                    image_id: field("image_id").to_string(),
                    image_file: if path.is_absolute() { path } else { base.join(path) },
                    diagnosis: Some(field("label").to_string()),
                    tone: Tone::parse_label(field("fitzpatrick_scale")),
                    tone_raw: field("fitzpatrick_scale").to_string(),
                }
            }
        };
        rows.push(row);
    }

    let unmapped = mapping.unmapped(
        rows.iter()
            .filter_map(|r| r.diagnosis.as_deref())
            .filter(|d| !normalize_diagnosis(d).is_empty()),
    );
    if !unmapped.is_empty() {
        return Err(Error::UnmappedDiagnosis(unmapped));
    }

    let mut out = Ingested {
        rows: rows.len(),
        ..Default::default()
    };
    let mut seen_hashes: HashSet<[u8; 32]> = HashSet::new();
    for (row_idx, row) in rows.into_iter().enumerate() {
        let reject = |reason: RejectReason, detail: String| Rejection {
            row: row_idx,
            image_id: row.image_id.clone(),
            reason,
            detail,
        };
        let diagnosis = match row.diagnosis.as_deref().filter(|d| !d.trim().is_empty()) {
            Some(d) => d.to_string(),
            None => {
                out.rejections
                    .push(reject(RejectReason::NoConditionLabel, String::new()));
                continue;
            }
        };
        let condition = match harmonize_diagnosis(&diagnosis, mapping)? {
            MappedClass::Retained(c) => c,
            MappedClass::Excluded => {
                out.rejections
                    .push(reject(RejectReason::ExcludedCondition, diagnosis));
                continue;
            }
        };
        let Some(tone) = row.tone else {
            out.rejections
                .push(reject(RejectReason::UnknownTone, row.tone_raw.clone()));
            continue;
        };
        if !row.image_file.is_file() {
            out.rejections.push(reject(
                RejectReason::MissingImage,
                row.image_file.display().to_string(),
            ));
            continue;
        }
        if options.dedup {
            let bytes =
                std::fs::read(&row.image_file).map_err(|e| Error::io(&row.image_file, e))?;
            let digest: [u8; 32] = Sha256::digest(&bytes).into();
            if !seen_hashes.insert(digest) {
                out.rejections.push(reject(
                    RejectReason::DuplicateImage,
                    hex::encode(&digest[..8]),
                ));
                continue;
            }
        }
        out.records.push(ImageRecord {
            image_id: row.image_id,
            image_path: row.image_file,
            raw_diagnosis: diagnosis,
            condition,
            tone,
            source,
        });
    }
    Ok(out)
}

fn resolve_image(dir: &Path, id: &str) -> PathBuf {
    for ext in ["jpg", "jpeg", "png"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.is_file() {
            return p;
        }
    }
    dir.join(format!("{id}.jpg"))
}

/// Mode of the rater labels; ties go to the darker type. Unparseable or
/// missing labels are ignored.
pub fn scin_consensus_tone(labels: &[&str]) -> Option<Tone> {
    let mut counts: BTreeMap<Tone, usize> = BTreeMap::new();
    for t in labels.iter().filter_map(|l| Tone::parse_label(l)) {
        *counts.entry(t).or_default() += 1;
    }
    // BTreeMap iterates light to dark, so `max_by_key` keeps the last (darkest) maximum.
    counts.into_iter().max_by_key(|&(_, n)| n).map(|(t, _)| t)
}

/// Parse a Python-style list literal such as `['Eczema', 'Psoriasis']`.
fn parse_label_list(raw: &str) -> Vec<String> {
    let inner = raw.trim().trim_start_matches('[').trim_end_matches(']');
    split_quoted(inner)
        .into_iter()
        .map(|s| s.trim().trim_matches(|c| c == '\'' || c == '"').to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Parse a Python-style dict literal such as `{'Eczema': 0.5, 'Tinea': 0.5}`.
fn parse_weighted_labels(raw: &str) -> Vec<(String, f64)> {
    let inner = raw.trim().trim_start_matches('{').trim_end_matches('}');
    split_quoted(inner)
        .into_iter()
        .filter_map(|entry| {
            let (k, v) = entry.rsplit_once(':')?;
            let k = k.trim().trim_matches(|c| c == '\'' || c == '"').to_string();
            Some((k, v.trim().parse().ok()?))
        })
        .collect()
}

/// Split on commas that are not inside quotes.
fn split_quoted(s: &str) -> Vec<String> {
    let mut parts = Vec::new();
    let mut cur = String::new();
    let mut quote: Option<char> = None;
    for c in s.chars() {
        match (quote, c) {
            (None, '\'' | '"') => {
                quote = Some(c);
                cur.push(c);
            }
            (Some(q), c) if c == q => {
                quote = None;
                cur.push(c);
            }
            (None, ',') => parts.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        parts.push(cur);
    }
    parts
}

fn scin_condition(labels: &str, weighted: &str, rule: CollapseRule) -> Option<String> {
    let listed = parse_label_list(labels);
    if rule == CollapseRule::TopWeighted {
        let mut best: Option<(String, f64)> = None;
        for (label, w) in parse_weighted_labels(weighted) {
            if best.as_ref().is_none_or(|(_, bw)| w > *bw) {
                best = Some((label, w));
            }
        }
        if let Some((label, _)) = best {
            return Some(label);
        }
    }
    listed.into_iter().next()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tone_parsing_covers_source_encodings() {
        assert_eq!(Tone::parse_label("2"), Tone::new(2));
        assert_eq!(Tone::parse_label("3.0"), Tone::new(3));
        assert_eq!(Tone::parse_label("FST5"), Tone::new(5));
        assert_eq!(Tone::parse_label("iv"), Tone::new(4));
        assert_eq!(Tone::parse_label("-1"), None);
        assert_eq!(Tone::parse_label("7"), None);
        assert_eq!(Tone::parse_label(""), None);
        assert_eq!(Tone::parse_label("NONE_IDENTIFIED"), None);
    }

    #[test]
    fn scin_tone_mode_breaks_ties_toward_darker() {
        assert_eq!(scin_consensus_tone(&["FST2", "FST2", "FST4"]), Tone::new(2));
        assert_eq!(scin_consensus_tone(&["FST2", "FST4"]), Tone::new(4));
        assert_eq!(scin_consensus_tone(&["FST3", "", "FST1"]), Tone::new(3));
        assert_eq!(scin_consensus_tone(&["", "NONE_IDENTIFIED"]), None);
    }

    #[test]
    fn scin_condition_collapse_rules() {
        let labels = "['Eczema', 'Psoriasis']";
        let weighted = "{'Psoriasis': 0.67, 'Eczema': 0.33}";
        assert_eq!(
            scin_condition(labels, weighted, CollapseRule::TopWeighted).as_deref(),
            Some("Psoriasis")
        );
        assert_eq!(
            scin_condition(labels, weighted, CollapseRule::FirstListed).as_deref(),
            Some("Eczema")
        );
        assert_eq!(
            scin_condition(labels, "", CollapseRule::TopWeighted).as_deref(),
            Some("Eczema")
        );
        // ties keep the earlier entry
        assert_eq!(
            scin_condition("[]", "{'Tinea': 0.5, 'Eczema': 0.5}", CollapseRule::TopWeighted)
                .as_deref(),
            Some("Tinea")
        );
        assert_eq!(scin_condition("[]", "", CollapseRule::TopWeighted), None);
        assert_eq!(
            parse_label_list("['Acute dermatitis, NOS', 'Eczema']"),
            vec!["Acute dermatitis, NOS".to_string(), "Eczema".to_string()]
        );
    }
}
