//! Diagnosis harmonization tables.
//!
//! A mapping file is plain text with one `diagnosis,CLASS` entry per line,
//! split on the last comma. Lines starting with `#` are comments. A line of
//! the form `@collapse <rule>` selects how multi-label sources (SCIN) reduce
//! their condition list to a single diagnosis, and `@default <CLASS>` declares
//! the class for strings without an entry. Without `@default`, any string
//! lacking an entry is an unmapped-diagnosis error.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Condition, Source};
use crate::error::{Error, Result};

/// Target of a diagnosis mapping entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MappedClass {
    Retained(Condition),
    Excluded,
}

impl fmt::Display for MappedClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MappedClass::Retained(c) => write!(f, "{c}"),
            MappedClass::Excluded => f.write_str("EXCLUDED"),
        }
    }
}

impl FromStr for MappedClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "EXCLUDED" => Ok(MappedClass::Excluded),
            other => other.parse().map(MappedClass::Retained),
        }
    }
}

/// Rule used to collapse a multi-label condition field to one diagnosis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseRule {
    /// Highest weight in the weighted label column; ties go to the earlier label.
    #[default]
    TopWeighted,
    /// First label of the dermatologist label list.
    FirstListed,
}

impl FromStr for CollapseRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "top_weighted" => Ok(CollapseRule::TopWeighted),
            "first_listed" => Ok(CollapseRule::FirstListed),
            other => Err(Error::config(format!("unknown collapse rule {other:?}"))),
        }
    }
}

/// Lowercase, trim, and collapse internal whitespace.
pub fn normalize_diagnosis(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisMapping {
    entries: BTreeMap<String, MappedClass>,
    collapse: CollapseRule,
    default: Option<MappedClass>,
}

impl DiagnosisMapping {
    pub fn new(entries: impl IntoIterator<Item = (String, MappedClass)>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|(k, v)| (normalize_diagnosis(&k), v))
                .collect(),
            collapse: CollapseRule::default(),
            default: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut mapping = DiagnosisMapping::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rule) = line.strip_prefix("@collapse") {
                mapping.collapse = rule.parse()?;
                continue;
            }
            if let Some(class) = line.strip_prefix("@default") {
                mapping.default = Some(class.parse()?);
                continue;
            }
            let (diagnosis, class) = line.rsplit_once(',').ok_or_else(|| {
                Error::config(format!(
                    "mapping line {}: expected `diagnosis,CLASS`, got {line:?}",
                    lineno + 1
                ))
            })?;
            let key = normalize_diagnosis(diagnosis);
            if key.is_empty() {
                return Err(Error::config(format!(
                    "mapping line {}: empty diagnosis",
                    lineno + 1
                )));
            }
            let class: MappedClass = class.parse().map_err(|_| {
                Error::config(format!(
                    "mapping line {}: unknown class {:?}",
                    lineno + 1,
                    class.trim()
                ))
            })?;
            if let Some(prev) = mapping.entries.insert(key.clone(), class) {
                if prev != class {
                    return Err(Error::config(format!(
                        "mapping line {}: {key:?} mapped to both {prev} and {class}",
                        lineno + 1
                    )));
                }
            }
        }
        Ok(mapping)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The mapping shipped with the crate for `source`.
    pub fn builtin(source: Source) -> Self {
        let text = match source {
            Source::Fitzpatrick17k => include_str!("../../mappings/fitzpatrick17k.csv"),
            Source::PadUfes => include_str!("../../mappings/padufes.csv"),
            Source::Scin => include_str!("../../mappings/scin.csv"),
            Source::Synthetic => include_str!("../../mappings/synthetic.csv"),
        };
        Self::parse(text).expect("builtin mapping files are valid")
    }

    pub fn collapse_rule(&self) -> CollapseRule {
        self.collapse
    }

    pub fn with_collapse_rule(mut self, rule: CollapseRule) -> Self {
        self.collapse = rule;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lookup including the declared default.
    pub fn get(&self, normalized: &str) -> Option<MappedClass> {
        self.entries.get(normalized).copied().or(self.default)
    }

    pub fn default_class(&self) -> Option<MappedClass> {
        self.default
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, MappedClass)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Every distinct string in `raws` that has no entry, normalized and sorted.
    pub fn unmapped<'a>(&self, raws: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut missing: Vec<String> = raws
            .into_iter()
            .map(normalize_diagnosis)
            .filter(|k| self.get(k).is_none())
            .collect();
        missing.sort();
        missing.dedup();
        missing
    }
}

/// Map one raw diagnosis string through `mapping`.
pub fn harmonize_diagnosis(raw: &str, mapping: &DiagnosisMapping) -> Result<MappedClass> {
    let key = normalize_diagnosis(raw);
    if key.is_empty() {
        return Err(Error::invalid("empty diagnosis string"));
    }
    mapping
        .get(&key)
        .ok_or(Error::UnmappedDiagnosis(vec![key]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_collapses_whitespace_and_case() {
        assert_eq!(normalize_diagnosis("  Basal   Cell\tCarcinoma "), "basal cell carcinoma");
    }

    #[test]
    fn harmonizes_retained_and_excluded_classes() {
        let m = DiagnosisMapping::builtin(Source::Fitzpatrick17k);
        assert_eq!(
            harmonize_diagnosis("Psoriasis ", &m).unwrap(),
            MappedClass::Retained(Condition::Psoriasis)
        );
        assert_eq!(
            harmonize_diagnosis("eczema", &m).unwrap(),
            MappedClass::Retained(Condition::Eczema)
        );
        assert_eq!(harmonize_diagnosis("acne", &m).unwrap(), MappedClass::Excluded);
    }

    #[test]
    fn unmapped_is_an_error_naming_the_string() {
        let m = DiagnosisMapping::builtin(Source::Fitzpatrick17k);
        match harmonize_diagnosis("Dragon Scale", &m) {
            Err(Error::UnmappedDiagnosis(v)) => assert_eq!(v, vec!["dragon scale".to_string()]),
            other => panic!("expected unmapped error, got {other:?}"),
        }
        assert!(harmonize_diagnosis("   ", &m).is_err());
    }

    #[test]
    fn only_eczema_and_psoriasis_survive_from_non_neoplastic() {
        // Every inflammatory-looking label outside the two retained classes is excluded.
        for source in [Source::Fitzpatrick17k, Source::Scin] {
            let m = DiagnosisMapping::builtin(source);
            for (name, class) in m.iter() {
                if let MappedClass::Retained(c) = class {
                    if !c.is_neoplastic() {
                        assert!(
                            name.contains("eczema") || name.contains("psoriasis"),
                            "{source:?}: {name} retained as {c}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn builtin_mappings_have_expected_shape() {
        let m = DiagnosisMapping::builtin(Source::Fitzpatrick17k);
        assert!(m.len() > 100);
        assert_eq!(m.default_class(), None);
        let scin = DiagnosisMapping::builtin(Source::Scin);
        assert_eq!(scin.default_class(), Some(MappedClass::Excluded));
        assert_eq!(
            scin.get("eczema"),
            Some(MappedClass::Retained(Condition::Eczema))
        );
        assert_eq!(scin.get("something rare"), Some(MappedClass::Excluded));
        let pad = DiagnosisMapping::builtin(Source::PadUfes);
        assert_eq!(pad.get("mel"), Some(MappedClass::Retained(Condition::Malignant)));
        assert_eq!(pad.get("ack"), Some(MappedClass::Excluded));
    }

    #[test]
    fn parse_rejects_conflicts_and_reads_directives() {
        let m = DiagnosisMapping::parse("# c\n@collapse first_listed\nfoo bar,BENIGN\n").unwrap();
        assert_eq!(m.collapse_rule(), CollapseRule::FirstListed);
        assert_eq!(m.get("baz"), None);
        assert_eq!(m.get("foo bar"), Some(MappedClass::Retained(Condition::Benign)));
        assert!(DiagnosisMapping::parse("a,BENIGN\nA ,MALIGNANT\n").is_err());
        assert!(DiagnosisMapping::parse("a,WHATEVER\n").is_err());
        assert!(DiagnosisMapping::parse("no comma here\n").is_err());
    }

    #[test]
    fn labels_with_commas_split_on_last_comma() {
        let m = DiagnosisMapping::parse("eczema, unspecified,ECZEMA\n").unwrap();
        assert_eq!(
            m.get("eczema, unspecified"),
            Some(MappedClass::Retained(Condition::Eczema))
        );
    }
}
