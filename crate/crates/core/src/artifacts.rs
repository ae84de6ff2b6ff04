//! Stage output files and the records they hold.
//!
//! | stage | files |
//! |---|---|
//! | ingest | `run.json`, `records.jsonl`, `load_report.json` |
//! | filter | `filtered.jsonl`, `accuracy.json` |
//! | generate | `variations.jsonl`, `generation_report.json` |
//! | evaluate | `pairs.jsonl`, `rates.jsonl` |
//! | analyze | `statistics.json` |
//! | report | `report.json`, `report.md`, `rates.csv` |
//!
//! Every file is written to a temporary name and renamed into place. Backend
//! cache counters go to `run_stats.json`, which is excluded from the
//! byte-identical outputs.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{DivergenceAnalysis, KsMode, TokenStats};
use crate::error::{Error, Result};
use crate::types::{NliRecord, Prediction};

pub const RUN: &str = "run.json";
pub const RECORDS: &str = "records.jsonl";
pub const LOAD_REPORT: &str = "load_report.json";
pub const FILTERED: &str = "filtered.jsonl";
pub const ACCURACY: &str = "accuracy.json";
pub const VARIATIONS: &str = "variations.jsonl";
pub const GENERATION_REPORT: &str = "generation_report.json";
pub const PAIRS: &str = "pairs.jsonl";
pub const RATES: &str = "rates.jsonl";
pub const STATISTICS: &str = "statistics.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const RATES_CSV: &str = "rates.csv";
pub const RUN_STATS: &str = "run_stats.json";

/// Provenance written by `ingest` and carried into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
    pub models: Vec<String>,
    pub datasets: Vec<String>,
    pub k: usize,
    pub budget: u32,
    pub ks_mode: KsMode,
    pub fuzzy_threshold: f64,
}

/// A correctly classified record for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPrediction {
    pub model: String,
    pub record: NliRecord,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: String,
    pub dataset_id: String,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub model: String,
    pub dataset_id: String,
    pub records: usize,
    /// Records with at least one accepted variation.
    pub evaluated: usize,
    pub excluded: usize,
    pub shortfall: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub rounds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAnalysis {
    pub model: String,
    pub dataset_id: String,
    pub analysis: DivergenceAnalysis,
}

/// Contents of `statistics.json`. Only `overall` keeps per-pair values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statistics {
    pub ks_mode: KsMode,
    pub overall: DivergenceAnalysis,
    pub groups: Vec<GroupAnalysis>,
    pub token_stats: Vec<TokenStats>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    let mut file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, rows: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut bytes = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut bytes, row)?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)
}

/// Path of a stage input, or a missing-input error naming the producing stage.
pub fn require(dir: &Path, name: &str, stage: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingInput {
            stage: stage.to_string(),
            path,
        })
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}
