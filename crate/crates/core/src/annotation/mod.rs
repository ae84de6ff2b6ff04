//! Human evaluation of generated variations.
//!
//! Tasks are sampled from accepted candidates, judgments are appended to a
//! journal, and the live state is the last judgment per `(task, annotator)`.

pub mod server;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::sample_indices;
use crate::variation::{VariationCandidate, VariationSet};

pub use server::{AnnotationServer, AnnotationService};

/// Sample size used for the reference human evaluation.
pub const DEFAULT_SAMPLE: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub model: String,
    pub dataset_id: String,
    pub record_id: String,
    pub candidate_index: usize,
    pub h: String,
    pub h_prime: String,
    pub annotators: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub task_id: String,
    pub annotator: String,
    pub equivalent: bool,
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
}

impl Judgment {
    pub fn now(task_id: impl Into<String>, annotator: impl Into<String>, equivalent: bool) -> Self {
        Judgment {
            task_id: task_id.into(),
            annotator: annotator.into(),
            equivalent,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            comment: None,
        }
    }
}

/// Draws `n` accepted candidates, allocated across datasets in proportion to
/// their pool sizes (largest remainder), then sampled within each dataset.
pub fn sample_for_annotation(
    sets: &[VariationSet],
    n: usize,
    seed: u64,
    annotators: &[String],
) -> Result<Vec<AnnotationTask>> {
    let mut pools: BTreeMap<&str, Vec<(&VariationSet, &VariationCandidate)>> = BTreeMap::new();
    for set in sets {
        for c in &set.accepted {
            pools.entry(set.dataset_id.as_str()).or_default().push((set, c));
        }
    }
    let total: usize = pools.values().map(Vec::len).sum();
    if n > total {
        return Err(Error::Precondition(format!(
            "{n} annotation tasks requested from {total} accepted candidates"
        )));
    }

    let mut quotas: Vec<(usize, usize, usize)> = pools
        .values()
        .enumerate()
        .map(|(i, pool)| {
            let exact = n * pool.len();
            (i, exact / total.max(1), exact % total.max(1))
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
    by_remainder.sort_by(|a, b| quotas[*b].2.cmp(&quotas[*a].2).then(a.cmp(b)));
    for i in by_remainder.into_iter().take(n - assigned) {
        quotas[i].1 += 1;
    }

    let mut tasks = Vec::with_capacity(n);
    for ((_, pool), (i, quota, _)) in pools.iter().zip(&quotas) {
        for idx in sample_indices(pool.len(), *quota, seed.wrapping_add(*i as u64)) {
            let (set, c) = pool[idx];
            tasks.push(AnnotationTask {
                task_id: format!("task-{:04}", tasks.len() + 1),
                model: set.model.clone(),
                dataset_id: set.dataset_id.clone(),
                record_id: set.record_id.clone(),
                candidate_index: c.index,
                h: set.hypothesis.clone(),
                h_prime: c.text.clone(),
                annotators: annotators.to_vec(),
            });
        }
    }
    Ok(tasks)
}

/// Cohen's κ for two annotators' binary judgments over the same items.
pub fn cohens_kappa(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::IncompleteOverlap(format!(
            "{} vs {} judgments",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::IncompleteOverlap("no jointly judged items".into()));
    }
    let n = a.len() as f64;
    let observed = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let yes_a = a.iter().filter(|x| **x).count() as f64 / n;
    let yes_b = b.iter().filter(|x| **x).count() as f64 / n;
    let expected = yes_a * yes_b + (1.0 - yes_a) * (1.0 - yes_b);
    if expected == 1.0 {
        return Ok(1.0);
    }
    Ok((observed - expected) / (1.0 - expected))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub n: usize,
    pub percent_agreement: f64,
    pub kappa: f64,
    /// Share of all judgments marking the pair equivalent.
    pub percent_equivalent: f64,
}

pub fn agreement_report(a: &[bool], b: &[bool]) -> Result<AgreementReport> {
    let kappa = cohens_kappa(a, b)?;
    let n = a.len();
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count();
    let yes = a.iter().chain(b).filter(|x| **x).count();
    Ok(AgreementReport {
        n,
        percent_agreement: 100.0 * agree as f64 / n as f64,
        kappa,
        percent_equivalent: 100.0 * yes as f64 / (2 * n) as f64,
    })
}

/// Append-only judgment journal with a folded live view.
pub struct JudgmentStore {
    path: Option<PathBuf>,
    live: RwLock<HashMap<(String, String), Judgment>>,
    writer: Mutex<Option<File>>,
}

impl JudgmentStore {
    pub fn in_memory() -> Self {
        JudgmentStore {
            path: None,
            live: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Replays `path` (if it exists) and opens it for appending.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut live = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Judgment>(&line) {
                    Ok(j) => {
                        live.insert((j.task_id.clone(), j.annotator.clone()), j);
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable judgment: {e}", path.display(), i + 1),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(JudgmentStore {
            path: Some(path),
            live: RwLock::new(live),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn submit(&self, judgment: Judgment) -> Result<()> {
        let mut writer = self.writer.lock().expect("journal lock");
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_string(&judgment)?;
            line.push('\n');
            let path = self.path.clone().unwrap_or_default();
            file.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
            file.flush().map_err(|e| Error::io(&path, e))?;
        }
        self.live
            .write()
            .expect("journal lock")
            .insert((judgment.task_id.clone(), judgment.annotator.clone()), judgment);
        Ok(())
    }

    pub fn get(&self, task_id: &str, annotator: &str) -> Option<Judgment> {
        self.live
            .read()
            .expect("journal lock")
            .get(&(task_id.to_string(), annotator.to_string()))
            .cloned()
    }

    /// All live judgments ordered by task then annotator.
    pub fn snapshot(&self) -> Vec<Judgment> {
        let mut all: Vec<Judgment> = self.live.read().expect("journal lock").values().cloned().collect();
        all.sort_by(|a, b| (&a.task_id, &a.annotator).cmp(&(&b.task_id, &b.annotator)));
        all
    }

    pub fn judged_by(&self, annotator: &str) -> HashSet<String> {
        self.live
            .read()
            .expect("journal lock")
            .values()
            .filter(|j| j.annotator == annotator)
            .map(|j| j.task_id.clone())
            .collect()
    }

    /// Paired judgments of `a` and `b` over `tasks`; every task must be judged by both.
    pub fn paired(&self, tasks: &[AnnotationTask], a: &str, b: &str) -> Result<(Vec<bool>, Vec<bool>)> {
        let live = self.live.read().expect("journal lock");
        let mut va = Vec::with_capacity(tasks.len());
        let mut vb = Vec::with_capacity(tasks.len());
        let mut missing = 0;
        for t in tasks {
            match (
                live.get(&(t.task_id.clone(), a.to_string())),
                live.get(&(t.task_id.clone(), b.to_string())),
            ) {
                (Some(x), Some(y)) => {
                    va.push(x.equivalent);
                    vb.push(y.equivalent);
                }
                _ => missing += 1,
            }
        }
        if missing > 0 {
            return Err(Error::IncompleteOverlap(format!(
                "{missing} of {} tasks lack a judgment from {a} or {b}",
                tasks.len()
            )));
        }
        Ok((va, vb))
    }
}

/// CSV export of every live judgment joined with its task texts.
pub fn export_csv(tasks: &[AnnotationTask], judgments: &[Judgment]) -> Result<String> {
    let by_id: HashMap<&str, &AnnotationTask> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Consistency(format!("csv export: {e}"));
    w.write_record([
        "task_id", "annotator", "equivalent", "timestamp", "dataset_id", "record_id", "candidate_index", "h",
        "h_prime", "comment",
    ])
    .map_err(io)?;
    for j in judgments {
        let task = by_id.get(j.task_id.as_str());
        w.write_record([
            j.task_id.as_str(),
            j.annotator.as_str(),
            if j.equivalent { "true" } else { "false" },
            &j.timestamp.to_string(),
            task.map(|t| t.dataset_id.as_str()).unwrap_or(""),
            task.map(|t| t.record_id.as_str()).unwrap_or(""),
            &task.map(|t| t.candidate_index.to_string()).unwrap_or_default(),
            task.map(|t| t.h.as_str()).unwrap_or(""),
            task.map(|t| t.h_prime.as_str()).unwrap_or(""),
            j.comment.as_deref().unwrap_or(""),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Consistency(format!("csv export: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
