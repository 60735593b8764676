//! Dataset manifests and biased-split construction.
//!
//! Two manifest encodings are accepted:
//!
//! * CSV with a header row containing `image_id,path,label,split` plus any
//!   number of boolean attribute columns. An optional first line
//!   `# manifest_version: 1` declares the schema version.
//! * JSON lines, one object per record with the same keys; attributes go in an
//!   `attributes` object. An optional first line `{"manifest_version": 1}` is
//!   treated as the header.
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Audit,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "audit" => Ok(Split::Audit),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Audit => "audit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub true_label: usize,
    #[serde(default)]
    pub attributes: BTreeMap<String, bool>,
    pub split: Split,
}

/// A manifest row that could not be turned into a usable record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub image_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub records: Vec<ImageRecord>,
    pub errors: Vec<RecordError>,
}

/// Image ids become file names and URL segments, so they are restricted.
pub fn is_valid_image_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

#[derive(Deserialize)]
struct JsonRow {
    image_id: String,
    path: PathBuf,
    label: usize,
    split: String,
    #[serde(default)]
    attributes: BTreeMap<String, bool>,
}

/// Loads a manifest. Rows whose image file is missing are reported in
/// [`LoadedDataset::errors`]; malformed manifests and duplicate ids are fatal.
pub fn load_dataset(manifest: &Path, num_classes: usize) -> Result<LoadedDataset> {
    let text = std::fs::read_to_string(manifest).map_err(|e| AuditError::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let parse_err = |line: usize, message: String| AuditError::Parse {
        path: manifest.to_path_buf(),
        message: format!("line {line}: {message}"),
    };

    let is_jsonl = manifest
        .extension()
        .is_some_and(|e| e == "jsonl" || e == "ndjson")
        || text.trim_start().starts_with('{');
    let rows = if is_jsonl {
        parse_jsonl(&text, parse_err)?
    } else {
        parse_csv(&text, parse_err)?
    };

    let mut seen = HashSet::new();
    let mut out = LoadedDataset::default();
    for (line, mut record) in rows {
        if !is_valid_image_id(&record.image_id) {
            return Err(parse_err(line, format!("invalid image_id `{}`", record.image_id)));
        }
        if !seen.insert(record.image_id.clone()) {
            return Err(AuditError::DuplicateId(format!("image `{}`", record.image_id)));
        }
        if record.true_label >= num_classes {
            return Err(AuditError::Validation(format!(
                "image `{}` has label {} but the model has {num_classes} classes",
                record.image_id, record.true_label
            )));
        }
        if record.path.is_relative() {
            record.path = base.join(&record.path);
        }
        if !record.path.is_file() {
            out.errors.push(RecordError {
                line,
                image_id: Some(record.image_id.clone()),
                message: format!("image file {} not found", record.path.display()),
            });
            continue;
        }
        out.records.push(record);
    }
    Ok(out)
}

fn check_version(v: u64, parse_err: &impl Fn(usize, String) -> AuditError) -> Result<()> {
    if v != MANIFEST_VERSION as u64 {
        return Err(parse_err(1, format!("unsupported manifest_version {v}")));
    }
    Ok(())
}

fn parse_jsonl(
    text: &str,
    parse_err: impl Fn(usize, String) -> AuditError,
) -> Result<Vec<(usize, ImageRecord)>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| parse_err(line, e.to_string()))?;
        if let Some(v) = value.get("manifest_version") {
            let v = v
                .as_u64()
                .ok_or_else(|| parse_err(line, "manifest_version must be an integer".into()))?;
            check_version(v, &parse_err)?;
            continue;
        }
        let row: JsonRow = serde_json::from_value(value).map_err(|e| parse_err(line, e.to_string()))?;
        let split = row.split.parse().map_err(|e| parse_err(line, e))?;
        rows.push((
            line,
            ImageRecord {
                image_id: row.image_id,
                path: row.path,
                true_label: row.label,
                attributes: row.attributes,
                split,
            },
        ));
    }
    Ok(rows)
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

fn parse_csv(
    text: &str,
    parse_err: impl Fn(usize, String) -> AuditError,
) -> Result<Vec<(usize, ImageRecord)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut header = None;
    for (i, raw) in lines.by_ref() {
        if let Some(rest) = raw.trim().strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("manifest_version:") {
                let v: u64 = v
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(i + 1, "manifest_version must be an integer".into()))?;
                check_version(v, &parse_err)?;
            }
            continue;
        }
        header = Some((i + 1, raw));
        break;
    }
    let (hline, header) = header.ok_or_else(|| parse_err(1, "missing header row".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| parse_err(hline, format!("missing column `{name}`")))
    };
    let (id_col, path_col, label_col, split_col) =
        (find("image_id")?, find("path")?, find("label")?, find("split")?);
    let attr_cols: Vec<(usize, &str)> = cols
        .iter()
        .enumerate()
        .filter(|(i, _)| ![id_col, path_col, label_col, split_col].contains(i))
        .map(|(i, c)| (i, *c))
        .collect();

    let mut rows = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", cols.len(), fields.len()),
            ));
        }
        let true_label = fields[label_col]
            .parse()
            .map_err(|_| parse_err(line, format!("bad label `{}`", fields[label_col])))?;
        let split = fields[split_col].parse().map_err(|e| parse_err(line, e))?;
        let mut attributes = BTreeMap::new();
        for &(c, name) in &attr_cols {
            if fields[c].is_empty() {
                continue;
            }
            let v = parse_bool(fields[c])
                .ok_or_else(|| parse_err(line, format!("bad boolean `{}` in `{name}`", fields[c])))?;
            attributes.insert(name.to_string(), v);
        }
        rows.push((
            line,
            ImageRecord {
                image_id: fields[id_col].to_string(),
                path: PathBuf::from(fields[path_col]),
                true_label,
                attributes,
                split,
            },
        ));
    }
    Ok(rows)
}

/// Writes records as a versioned CSV manifest; paths are written as given.
pub fn write_csv_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let attr_names: Vec<String> = records
        .iter()
        .flat_map(|r| r.attributes.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = format!("# manifest_version: {MANIFEST_VERSION}\nimage_id,path,label,split");
    for a in &attr_names {
        out.push(',');
        out.push_str(a);
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}",
            r.image_id,
            r.path.display(),
            r.true_label,
            r.split
        ));
        for a in &attr_names {
            out.push(',');
            if let Some(v) = r.attributes.get(a) {
                out.push_str(if *v { "1" } else { "0" });
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| AuditError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub attribute: String,
    pub label: usize,
    pub target_cooccurrence: f64,
    pub seed: u64,
}

/// Allowed distance between the achieved and requested co-occurrence.
pub const BIAS_TOLERANCE: f64 = 0.02;

/// Among records labelled `spec.label`, the fraction with `spec.attribute` set.
pub fn cooccurrence(records: &[ImageRecord], attribute: &str, label: usize) -> Option<f64> {
    let (mut pos, mut total) = (0usize, 0usize);
    for r in records.iter().filter(|r| r.true_label == label) {
        total += 1;
        if r.attributes.get(attribute).copied().unwrap_or(false) {
            pos += 1;
        }
    }
    (total > 0).then(|| pos as f64 / total as f64)
}

/// Raises the attribute/label co-occurrence to the target by dropping a seeded
/// sample of the `(label, not attribute)` group. All other records pass through
/// unchanged and in their original order.
pub fn inject_bias(records: &[ImageRecord], spec: &BiasSpec) -> Result<Vec<ImageRecord>> {
    let t = spec.target_cooccurrence;
    if !(t > 0.0 && t <= 1.0) {
        return Err(AuditError::Config(format!(
            "target_cooccurrence must lie in (0, 1], got {t}"
        )));
    }
    let mut positives = 0usize;
    let mut negatives = Vec::new();
    for (i, r) in records.iter().enumerate().filter(|(_, r)| r.true_label == spec.label) {
        match r.attributes.get(&spec.attribute) {
            Some(true) => positives += 1,
            Some(false) => negatives.push(i),
            None => {
                return Err(AuditError::Validation(format!(
                    "record `{}` lacks attribute `{}`",
                    r.image_id, spec.attribute
                )))
            }
        }
    }
    let total = positives + negatives.len();
    if total == 0 {
        return Err(AuditError::Validation(format!(
            "no records carry label {}",
            spec.label
        )));
    }
    let natural = positives as f64 / total as f64;
    let max = if positives > 0 { 1.0 } else { 0.0 };
    let unsatisfiable = || AuditError::UnsatisfiableBias {
        target: t,
        min: natural,
        max,
    };
    if t < natural - BIAS_TOLERANCE || positives == 0 {
        return Err(unsatisfiable());
    }

    // Keep m negatives so that positives / (positives + m) is closest to t.
    let ideal = positives as f64 * (1.0 - t) / t;
    let achieved = |m: usize| positives as f64 / (positives + m) as f64;
    let lo = (ideal.floor().max(0.0) as usize).min(negatives.len());
    let hi = (ideal.ceil().max(0.0) as usize).min(negatives.len());
    let keep = if (achieved(hi) - t).abs() <= (achieved(lo) - t).abs() {
        hi
    } else {
        lo
    };
    if (achieved(keep) - t).abs() > BIAS_TOLERANCE + 1e-12 {
        return Err(unsatisfiable());
    }
    if keep == negatives.len() {
        return Ok(records.to_vec());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut shuffled = negatives.clone();
    shuffled.shuffle(&mut rng);
    let dropped: HashSet<usize> = shuffled[keep..].iter().copied().collect();
    Ok(records
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, r)| r.clone())
        .collect())
}
