//! Dataset loading and evaluation-subset selection.
//!
//! Datasets are described by a [`DatasetManifest`]: where the file lives, how it
//! is encoded, which keys hold the premise/hypothesis/label, and how raw label
//! values map onto [`Label`]. Rows whose raw label is listed in
//! `drop_labels` (annotator-disagreement markers such as SNLI's `"-"`) are
//! skipped and counted in the [`LoadReport`].
//!
//! Subset sampling uses ChaCha8 seeded through `seed_from_u64`, a partial
//! Fisher–Yates shuffle driven by `next_u64` with rejection sampling for
//! bounded draws, and returns the chosen records in file order.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::types::{Label, NliRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// One JSON object per line.
    Jsonl,
    /// Header-bearing delimited text.
    Delimited,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldMap {
    #[serde(default = "default_premise_key")]
    pub premise: String,
    #[serde(default = "default_hypothesis_key")]
    pub hypothesis: String,
    #[serde(default = "default_label_key")]
    pub label: String,
    /// Optional key holding a record id; line numbers are used otherwise.
    #[serde(default)]
    pub id: Option<String>,
}

impl Default for FieldMap {
    fn default() -> Self {
        FieldMap {
            premise: default_premise_key(),
            hypothesis: default_hypothesis_key(),
            label: default_label_key(),
            id: None,
        }
    }
}

fn default_premise_key() -> String {
    "premise".into()
}
fn default_hypothesis_key() -> String {
    "hypothesis".into()
}
fn default_label_key() -> String {
    "label".into()
}
fn default_drop_labels() -> Vec<String> {
    vec!["-".into(), "-1".into()]
}
fn default_delimiter() -> char {
    ','
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetMode {
    #[default]
    Seeded,
    Prefix,
}

/// Description of one dataset file.
///
/// Manifest keys (TOML or JSON):
///
/// | key | meaning |
/// |-----|---------|
/// | `dataset_id` | name used in reports |
/// | `path` | data file, relative paths resolve against the config file |
/// | `format` | `jsonl` or `delimited` |
/// | `delimiter` | field separator for `delimited` (default `,`) |
/// | `fields` | `{premise, hypothesis, label, id}` key names |
/// | `labels` | raw value → `entailment`/`neutral`/`contradiction` |
/// | `drop_labels` | raw values that mark unresolvable gold labels |
/// | `sample_count` | evaluation subset size (all records when absent) |
/// | `subset_mode` | `seeded` (default) or `prefix` |
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub path: PathBuf,
    pub format: DatasetFormat,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub fields: FieldMap,
    pub labels: BTreeMap<String, Label>,
    #[serde(default = "default_drop_labels")]
    pub drop_labels: Vec<String>,
    #[serde(default)]
    pub sample_count: Option<usize>,
    #[serde(default)]
    pub subset_mode: SubsetMode,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelHistogram {
    pub entailment: usize,
    pub neutral: usize,
    pub contradiction: usize,
}

impl LabelHistogram {
    fn add(&mut self, label: Label) {
        match label {
            Label::Entailment => self.entailment += 1,
            Label::Neutral => self.neutral += 1,
            Label::Contradiction => self.contradiction += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub dataset_id: String,
    pub loaded: usize,
    pub dropped: usize,
    pub by_label: LabelHistogram,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub records: Vec<NliRecord>,
    pub report: LoadReport,
}

/// Reads the manifest's file and returns its records in file order.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<LoadedDataset> {
    let bytes = fs::read(&manifest.path).map_err(|e| Error::io(&manifest.path, e))?;
    load_dataset_bytes(manifest, &bytes)
}

/// Same as [`load_dataset`] over in-memory file contents.
pub fn load_dataset_bytes(manifest: &DatasetManifest, bytes: &[u8]) -> Result<LoadedDataset> {
    let rows = match manifest.format {
        DatasetFormat::Jsonl => jsonl_rows(&manifest.path, bytes)?,
        DatasetFormat::Delimited => delimited_rows(manifest, bytes)?,
    };

    let mut records = Vec::with_capacity(rows.len());
    let mut seen = HashSet::new();
    let mut report = LoadReport {
        dataset_id: manifest.dataset_id.clone(),
        loaded: 0,
        dropped: 0,
        by_label: LabelHistogram::default(),
    };
    let fields = &manifest.fields;
    let path = &manifest.path;

    for (line, row) in rows {
        let get = |key: &str| -> Result<&Value> {
            row.get(key).filter(|v| !v.is_null()).ok_or_else(|| Error::MissingField {
                path: path.clone(),
                line,
                key: key.to_string(),
            })
        };
        let raw_label = raw_value(get(&fields.label)?);
        if manifest.drop_labels.contains(&raw_label) {
            report.dropped += 1;
            continue;
        }
        let gold = *manifest.labels.get(&raw_label).ok_or_else(|| Error::UnmappedLabel {
            path: path.clone(),
            line,
            raw: raw_label.clone(),
        })?;
        let premise = text_field(get(&fields.premise)?, &fields.premise, path, line)?;
        let hypothesis = text_field(get(&fields.hypothesis)?, &fields.hypothesis, path, line)?;
        let record_id = match &fields.id {
            Some(key) => raw_value(get(key)?),
            None => format!("{}:{}", manifest.dataset_id, line),
        };
        if !seen.insert(record_id.clone()) {
            return Err(Error::DuplicateRecord(record_id));
        }
        report.loaded += 1;
        report.by_label.add(gold);
        records.push(NliRecord {
            record_id,
            dataset_id: manifest.dataset_id.clone(),
            premise,
            hypothesis,
            gold,
        });
    }
    Ok(LoadedDataset { records, report })
}

fn raw_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn text_field(v: &Value, key: &str, path: &Path, line: usize) -> Result<String> {
    let s = match v {
        Value::String(s) => s.clone(),
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("field `{key}` is not a string"),
            })
        }
    };
    if s.split_whitespace().next().is_none() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("field `{key}` is empty"),
        });
    }
    Ok(s)
}

type Row = serde_json::Map<String, Value>;

fn jsonl_rows(path: &Path, bytes: &[u8]) -> Result<Vec<(usize, Row)>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        match value {
            Value::Object(map) => rows.push((i + 1, map)),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "expected a JSON object".into(),
                })
            }
        }
    }
    Ok(rows)
}

fn delimited_rows(manifest: &DatasetManifest, bytes: &[u8]) -> Result<Vec<(usize, Row)>> {
    let path = &manifest.path;
    let delimiter = u8::try_from(manifest.delimiter).map_err(|_| {
        Error::Config(format!("delimiter {:?} is not a single byte", manifest.delimiter))
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .quoting(delimiter != b'\t')
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.clone(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut rows = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: Row = headers
            .iter()
            .zip(record.iter())
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (k.to_string(), Value::String(v.to_string())))
            .collect();
        rows.push((line, row));
    }
    Ok(rows)
}

/// Picks `n` records deterministically and returns them in input order.
pub fn select_subset(records: &[NliRecord], n: usize, seed: u64) -> Result<Vec<NliRecord>> {
    select_subset_with(records, n, seed, SubsetMode::Seeded)
}

pub fn select_subset_with(
    records: &[NliRecord],
    n: usize,
    seed: u64,
    mode: SubsetMode,
) -> Result<Vec<NliRecord>> {
    if n > records.len() {
        return Err(Error::Precondition(format!(
            "subset of {n} requested from {} records",
            records.len()
        )));
    }
    let indices = match mode {
        SubsetMode::Prefix => (0..n).collect(),
        SubsetMode::Seeded => sample_indices(records.len(), n, seed),
    };
    Ok(indices.into_iter().map(|i| records[i].clone()).collect())
}

/// Sorted sample of `n` distinct indices from `0..len`.
pub(crate) fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = i + bounded(&mut rng, (len - i) as u64) as usize;
        pool.swap(i, j);
    }
    let mut chosen = pool[..n].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Uniform draw from `0..range` by rejection.
pub(crate) fn bounded(rng: &mut ChaCha8Rng, range: u64) -> u64 {
    use rand::Rng;
    debug_assert!(range > 0);
    let zone = u64::MAX - (u64::MAX % range);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % range;
        }
    }
}
