//! Line-delimited JSON feature archives.
//!
//! Line 1 is the manifest `{version, d_v, d_a, vocab, splits: {name: count}}`.
//! Every following line is one record
//! `{id, split, tokens, visual, audio, label, text?}` with features as
//! nested arrays of frames.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::UtteranceSample;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub d_v: usize,
    pub d_a: usize,
    pub vocab: usize,
    pub splits: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveRecord {
    pub split: String,
    pub sample: UtteranceSample,
}

/// A validated archive. Records keep their file order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArchive {
    pub manifest: Manifest,
    records: Vec<ArchiveRecord>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    split: &'a str,
    tokens: &'a [usize],
    visual: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
    label: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
}

// Feature cells are optional so that `null` (and sanitized NaN/Infinity)
// surface as a named non-finite error instead of a parse failure.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    id: String,
    split: String,
    tokens: Vec<usize>,
    visual: Vec<Vec<Option<f64>>>,
    audio: Vec<Vec<Option<f64>>>,
    label: Option<f64>,
    #[serde(default)]
    text: Option<String>,
}

impl FeatureArchive {
    /// Builds and validates an archive; split counts in the manifest are
    /// recomputed from the records.
    pub fn new(d_v: usize, d_a: usize, vocab: usize, records: Vec<ArchiveRecord>) -> Result<Self> {
        let mut splits = BTreeMap::new();
        for r in &records {
            *splits.entry(r.split.clone()).or_insert(0) += 1;
        }
        let archive = Self { manifest: Manifest { version: ARCHIVE_VERSION, d_v, d_a, vocab, splits }, records };
        archive.validate()?;
        Ok(archive)
    }

    pub fn records(&self) -> &[ArchiveRecord] {
        &self.records
    }

    pub fn split(&self, name: &str) -> Vec<&UtteranceSample> {
        self.records.iter().filter(|r| r.split == name).map(|r| &r.sample).collect()
    }

    pub fn split_names(&self) -> impl Iterator<Item = &str> {
        self.manifest.splits.keys().map(String::as_str)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.version != ARCHIVE_VERSION {
            return Err(Error::InvalidManifest(format!("unsupported version {}", m.version)));
        }
        if m.d_v == 0 || m.d_a == 0 || m.vocab < 2 {
            return Err(Error::InvalidManifest("dims must be positive and vocab at least 2".into()));
        }
        let mut seen = HashSet::new();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &self.records {
            if !m.splits.contains_key(&r.split) {
                return Err(Error::InvalidManifest(format!("record `{}` names unknown split `{}`", r.sample.id, r.split)));
            }
            if !seen.insert(r.sample.id.as_str()) {
                return Err(Error::DuplicateId { record: r.sample.id.clone() });
            }
            r.sample.validate(m.d_v, m.d_a, m.vocab)?;
            *counts.entry(r.split.as_str()).or_insert(0) += 1;
        }
        for (name, &expected) in &m.splits {
            let found = counts.get(name.as_str()).copied().unwrap_or(0);
            if found != expected {
                return Err(Error::SplitCount { split: name.clone(), expected, found });
            }
        }
        Ok(())
    }

    /// Serializes to the archive text format.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.manifest)?;
        out.push('\n');
        for r in &self.records {
            let s = &r.sample;
            let line = RecordOut {
                id: &s.id,
                split: &r.split,
                tokens: &s.tokens,
                visual: s.visual.to_rows(),
                audio: s.audio.to_rows(),
                label: s.label,
                text: s.text.as_deref(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Replaces bare `NaN`, `Infinity` and `-Infinity` literals outside
/// strings with `null`.
fn sanitize_non_finite(line: &str) -> std::borrow::Cow<'_, str> {
    if !line.contains("NaN") && !line.contains("Infinity") {
        return line.into();
    }
    let mut out = String::with_capacity(line.len());
    let mut in_str = false;
    let mut escaped = false;
    let mut rest = line;
    while let Some(c) = rest.chars().next() {
        if in_str {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            rest = &rest[c.len_utf8()..];
            continue;
        }
        if c == '"' {
            in_str = true;
        }
        let literal = ["-Infinity", "Infinity", "NaN"].into_iter().find(|lit| rest.starts_with(lit));
        if let Some(lit) = literal {
            out.push_str("null");
            rest = &rest[lit.len()..];
        } else {
            out.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    out.into()
}

fn frames(record: &str, field: &'static str, rows: Vec<Vec<Option<f64>>>, width: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows.len() * width);
    let mut non_finite = false;
    for row in &rows {
        if row.len() != width {
            return Err(Error::DimensionMismatch { record: record.to_string(), modality: field, expected: width, found: row.len() });
        }
        for v in row {
            match v {
                Some(x) if x.is_finite() => data.push(*x),
                _ => {
                    non_finite = true;
                    data.push(f64::NAN);
                }
            }
        }
    }
    if non_finite {
        return Err(Error::NonFiniteValue { record: record.to_string(), field });
    }
    Ok(Matrix::from_vec(rows.len(), width, data))
}

/// Parses archive text.
pub fn parse_archive(text: &str) -> Result<FeatureArchive> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::InvalidManifest("empty archive".into()))?;
    let manifest: Manifest = serde_json::from_str(header).map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line = sanitize_non_finite(line);
        let r: RecordIn = serde_json::from_str(&line).map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
        let visual = frames(&r.id, "visual", r.visual, manifest.d_v)?;
        let audio = frames(&r.id, "audio", r.audio, manifest.d_a)?;
        let label = r.label.unwrap_or(f64::NAN);
        records.push(ArchiveRecord {
            split: r.split,
            sample: UtteranceSample { id: r.id, tokens: r.tokens, text: r.text, visual, audio, label },
        });
    }
    let archive = FeatureArchive { manifest, records };
    archive.validate()?;
    Ok(archive)
}

pub fn load_archive(path: &Path) -> Result<FeatureArchive> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_archive(&text)
}

pub fn write_archive(archive: &FeatureArchive, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, archive.to_jsonl()?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(d_v: usize, d_a: usize) -> String {
        format!(r#"{{"version":1,"d_v":{d_v},"d_a":{d_a},"vocab":10,"splits":{{"train":1}}}}"#)
    }

    fn row(width: usize, v: &str) -> String {
        format!("[{}]", vec![v; width].join(","))
    }

    fn record(visual_cell: &str, label: &str) -> String {
        format!(
            r#"{{"id":"a","split":"train","tokens":[0,5,6],"visual":[{},{}],"audio":[{}],"label":{label}}}"#,
            row(35, "0.5"),
            row(35, visual_cell),
            row(74, "-0.25"),
        )
    }

    #[test]
    fn minimal_archive_echoes_dims() {
        let text = format!("{}\n{}\n", header(35, 74), record("1.0", "1.5"));
        let a = parse_archive(&text).unwrap();
        assert_eq!(a.manifest.d_v, 35);
        assert_eq!(a.manifest.d_a, 74);
        assert_eq!(a.split("train").len(), 1);
        assert_eq!(a.split("train")[0].visual.shape(), (2, 35));
    }

    #[test]
    fn nan_cell_is_a_non_finite_error() {
        for cell in ["NaN", "null", "Infinity", "-Infinity"] {
            let text = format!("{}\n{}\n", header(35, 74), record(cell, "1.0"));
            match parse_archive(&text) {
                Err(Error::NonFiniteValue { field, .. }) => assert_eq!(field, "visual"),
                other => panic!("{cell}: expected non-finite error, got {other:?}"),
            }
        }
    }

    #[test]
    fn label_out_of_range() {
        let text = format!("{}\n{}\n", header(35, 74), record("1.0", "3.5"));
        assert!(matches!(parse_archive(&text), Err(Error::LabelOutOfRange { label, .. }) if label == 3.5));
    }

    #[test]
    fn dimension_mismatch_against_manifest() {
        let text = format!("{}\n{}\n", header(36, 74), record("1.0", "1.0"));
        assert!(matches!(parse_archive(&text), Err(Error::DimensionMismatch { modality: "visual", expected: 36, found: 35, .. })));
    }

    #[test]
    fn missing_file_is_named() {
        let err = load_archive(Path::new("/definitely/not/here.jsonl")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }

    #[test]
    fn split_counts_and_duplicates() {
        let text = format!("{}\n{}\n{}\n", header(35, 74), record("1.0", "1.0"), record("1.0", "1.0"));
        assert!(matches!(parse_archive(&text), Err(Error::DuplicateId { .. })));
        let text = format!("{}\n", header(35, 74));
        assert!(matches!(parse_archive(&text), Err(Error::SplitCount { expected: 1, found: 0, .. })));
    }

    #[test]
    fn sanitizer_leaves_strings_alone() {
        let s = sanitize_non_finite(r#"{"text":"NaN Infinity","x":[NaN,-Infinity,1]}"#);
        assert_eq!(s, r#"{"text":"NaN Infinity","x":[null,null,1]}"#);
    }
}
