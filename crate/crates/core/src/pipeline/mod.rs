//! Stage orchestration over a shared run configuration.
//!
//! Each stage reads its predecessors' files from the output directory and
//! writes its own (see [`crate::artifacts`]). A failed stage leaves a
//! `<stage>.incomplete` marker holding the error; a later successful run of
//! the stage removes it.

pub mod selftest;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analysis::{
    cosine_distance, group_divergence_analysis, token_stats_with, KsMode, PairTokenStats, TokenStats,
    DEFAULT_FUZZY_THRESHOLD,
};
use crate::annotation::{sample_for_annotation, AnnotationTask, DEFAULT_SAMPLE};
use crate::artifacts::{
    self, AccuracyRow, GenerationRow, GroupAnalysis, ModelPrediction, RunInfo, Statistics,
};
use crate::backend::{
    BackendConfig, BackendKind, CacheStats, CachedTransport, Capability, EmbedClient, Embedder,
    GeneratorClient, HttpTransport, MockBackend, MockTransport, NliClient, ResponseCache, Throttled,
    Transport,
};
use crate::error::{Error, Result, ResultExt};
use crate::ingest::{load_dataset, select_subset_with, DatasetManifest, LoadReport};
use crate::metrics::{evaluate_variations, fooling_rates, EvaluationPair, FoolingRates};
use crate::report::{self, ReportFormat, RunReport};
use crate::types::NliRecord;
use crate::variation::{acquire_variations, filter_correct, FilteredRecord, GenerationSettings, VariationSet};

/// Tasks file written by `annotate`.
pub const ANNOTATION_TASKS: &str = "annotation_tasks.jsonl";
/// Default judgment journal inside the output directory.
pub const JUDGMENTS: &str = "judgments.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Filter,
    Generate,
    Evaluate,
    Analyze,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Filter,
        Stage::Generate,
        Stage::Evaluate,
        Stage::Analyze,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Filter => "filter",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::Analyze => "analyze",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Seeds are required; nothing falls back to the clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Evaluation subset selection.
    pub subset: u64,
    /// Annotation task sampling.
    pub annotation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub annotators: Vec<String>,
    pub sample: usize,
    /// Judgment journal; `<out_dir>/judgments.jsonl` when absent.
    pub journal: Option<PathBuf>,
    /// Front-end assets served next to the API.
    pub static_dir: Option<PathBuf>,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            annotators: Vec::new(),
            sample: DEFAULT_SAMPLE,
            journal: None,
            static_dir: None,
        }
    }
}

fn default_k() -> usize {
    5
}
fn default_budget() -> u32 {
    10
}
fn default_threshold() -> f64 {
    DEFAULT_FUZZY_THRESHOLD
}

/// Run configuration, read from TOML.
///
/// ```toml
/// out_dir = "out"
/// k = 5
/// budget = 10
/// ks_mode = "discrete"        # or "scalar"
/// fuzzy_threshold = 0.8
///
/// [seeds]
/// subset = 13
/// annotation = 7
///
/// [[datasets]]
/// dataset_id = "mnli"
/// path = "data/mnli_dev.jsonl"
/// format = "jsonl"
/// labels = { entailment = "entailment", neutral = "neutral", contradiction = "contradiction" }
///
/// [backend]
/// kind = "http"
/// nli_models = ["roberta-large-mnli"]
/// generation_model = "flan-t5-xl"
/// endpoints = { nli = "http://127.0.0.1:8000", generate = "http://127.0.0.1:8000" }
/// cache_path = "cache/responses.jsonl"
///
/// [generation]
/// params = { num_candidates = 8, max_tokens = 40 }
/// temperature = { min = 0.3, max = 0.6 }
/// ```
///
/// Relative paths resolve against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_budget")]
    pub budget: u32,
    pub seeds: Seeds,
    /// Copied into the report verbatim; reports carry no wall-clock time.
    #[serde(default)]
    pub created_at: Option<String>,
    #[serde(default)]
    pub ks_mode: KsMode,
    #[serde(default = "default_threshold")]
    pub fuzzy_threshold: f64,
    pub datasets: Vec<DatasetManifest>,
    pub backend: BackendConfig,
    #[serde(default)]
    pub generation: GenerationSettings,
    #[serde(default)]
    pub annotation: AnnotationConfig,
}

fn resolve(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| e.context(format!("loading {}", path.display())))
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.out_dir);
        for d in &mut self.datasets {
            resolve(base, &mut d.path);
        }
        if let Some(p) = &mut self.backend.cache_path {
            resolve(base, p);
        }
        if let Some(mock) = &mut self.backend.mock {
            for p in [&mut mock.nli_table, &mut mock.generator_table].into_iter().flatten() {
                resolve(base, p);
            }
        }
        for p in [&mut self.annotation.journal, &mut self.annotation.static_dir]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.budget < 1 {
            return Err(Error::Config("budget must be >= 1".into()));
        }
        if !(self.fuzzy_threshold > 0.0 && self.fuzzy_threshold <= 1.0) {
            return Err(Error::Config("fuzzy_threshold must be in (0, 1]".into()));
        }
        if self.datasets.is_empty() {
            return Err(Error::Config("at least one dataset is required".into()));
        }
        let mut ids = HashSet::new();
        for d in &self.datasets {
            if !ids.insert(&d.dataset_id) {
                return Err(Error::Config(format!("duplicate dataset_id `{}`", d.dataset_id)));
            }
            if !d.path.is_file() {
                return Err(Error::Config(format!("dataset file {} not found", d.path.display())));
            }
        }
        self.backend.validate()?;
        if let Some(mock) = &self.backend.mock {
            for p in [&mock.nli_table, &mock.generator_table].into_iter().flatten() {
                if !p.is_file() {
                    return Err(Error::Config(format!("mock table {} not found", p.display())));
                }
            }
        }
        let models: HashSet<_> = self.backend.nli_models.iter().collect();
        if models.len() != self.backend.nli_models.len() {
            return Err(Error::Config("backend.nli_models lists a model twice".into()));
        }
        self.generation.temperature.validate()?;
        if self.generation.params.num_candidates < 1 || self.generation.params.max_tokens < 1 {
            return Err(Error::Config("num_candidates and max_tokens must be >= 1".into()));
        }
        if !self.annotation.annotators.is_empty() && self.annotation.annotators.len() != 2 {
            return Err(Error::Config("annotation.annotators must name exactly two annotators".into()));
        }
        Ok(())
    }

    /// Digest of everything that determines the outputs. Files are hashed by
    /// content, so the digest does not depend on where the inputs live.
    pub fn digest(&self) -> Result<String> {
        let file_hash = |p: &Path| -> Result<String> {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(hex::encode(Sha256::digest(&bytes)))
        };
        let mut datasets = Vec::new();
        for d in &self.datasets {
            let mut v = serde_json::to_value(d)?;
            v["path"] = json!(file_hash(&d.path)?);
            datasets.push(v);
        }
        let mock = match &self.backend.mock {
            Some(m) if self.backend.kind == BackendKind::Mock => json!({
                "nli_table": m.nli_table.as_deref().map(file_hash).transpose()?,
                "generator_table": m.generator_table.as_deref().map(file_hash).transpose()?,
                "nli_default": m.nli_default,
                "reflexive": m.reflexive,
                "embed_dim": m.embed_dim,
            }),
            _ => serde_json::Value::Null,
        };
        let doc = json!({
            "datasets": datasets,
            "backend": {
                "kind": self.backend.kind,
                "nli_models": self.backend.nli_models,
                "generation_model": self.backend.generation_model,
                "embedding_model": self.backend.embedding_model,
                "mock": mock,
            },
            "generation": self.generation,
            "k": self.k,
            "budget": self.budget,
            "seeds": self.seeds,
            "ks_mode": self.ks_mode,
            "fuzzy_threshold": self.fuzzy_threshold,
        });
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&doc)?)))
    }

    pub fn journal_path(&self) -> PathBuf {
        self.annotation
            .journal
            .clone()
            .unwrap_or_else(|| self.out_dir.join(JUDGMENTS))
    }
}

/// The composed backend: cache over throttle over the raw transport.
pub struct Backend {
    pub transport: Arc<dyn Transport>,
    pub cache: Arc<ResponseCache>,
    /// Present for mock backends, to count calls that reached it.
    pub mock: Option<Arc<MockTransport>>,
}

impl Backend {
    pub fn build(config: &BackendConfig) -> Result<Self> {
        let cache = Arc::new(match &config.cache_path {
            Some(p) => ResponseCache::open(p)?,
            None => ResponseCache::in_memory(),
        });
        let (inner, mock): (Arc<dyn Transport>, _) = match config.kind {
            BackendKind::Http => (
                Arc::new(HttpTransport::new(
                    config.endpoints.clone(),
                    Duration::from_secs_f64(config.timeout_secs),
                    config.retries,
                )),
                None,
            ),
            BackendKind::Mock => {
                let mock_config = config
                    .mock
                    .as_ref()
                    .ok_or_else(|| Error::Config("backend.mock is required for kind = \"mock\"".into()))?;
                let service = Arc::new(MockBackend::from_config(mock_config)?);
                let transport = Arc::new(MockTransport::new(service));
                (transport.clone() as Arc<dyn Transport>, Some(transport))
            }
        };
        let throttled = Throttled::new(inner, config.max_inflight);
        Ok(Backend {
            transport: Arc::new(CachedTransport::new(throttled, cache.clone())),
            cache,
            mock,
        })
    }

    /// Calls that reached the mock service (cache misses), if mocked.
    pub fn backend_calls(&self) -> Option<usize> {
        self.mock.as_ref().map(|m| m.calls())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub cache: CacheStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_calls: Option<usize>,
}

pub struct Pipeline {
    config: RunConfig,
    backend: Backend,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
        let backend = Backend::build(&config.backend)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.backend.max_inflight)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Pipeline { config, backend, pool })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn marker(&self, stage: Stage) -> PathBuf {
        self.path(&format!("{stage}.incomplete"))
    }

    /// Runs one stage, marking its outputs incomplete if it fails.
    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        let outcome = self.pool.install(|| match stage {
            Stage::Ingest => self.ingest(),
            Stage::Filter => self.filter(),
            Stage::Generate => self.generate(),
            Stage::Evaluate => self.evaluate(),
            Stage::Analyze => self.analyze(),
            Stage::Report => self.report().map(|_| ()),
        });
        let marker = self.marker(stage);
        match outcome {
            Ok(()) => {
                if marker.exists() {
                    std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
                }
                self.write_run_stats()
            }
            Err(e) => {
                let _ = std::fs::write(&marker, format!("{e}\n"));
                Err(e.context(format!("stage `{stage}`")))
            }
        }
    }

    /// Runs `from` and every later stage.
    pub fn run_from(&self, from: Stage) -> Result<()> {
        for stage in Stage::ALL.into_iter().filter(|s| *s >= from) {
            log::info!("running stage {stage}");
            self.run_stage(stage)?;
        }
        Ok(())
    }

    pub fn run_all(&self) -> Result<()> {
        self.run_from(Stage::Ingest)
    }

    pub fn run_stats(&self) -> RunStats {
        RunStats {
            cache: self.backend.cache.stats(),
            backend_calls: self.backend.backend_calls(),
        }
    }

    fn write_run_stats(&self) -> Result<()> {
        artifacts::write_json(&self.path(artifacts::RUN_STATS), &self.run_stats())
    }

    fn classifier(&self, model: &str) -> NliClient {
        NliClient::new(self.backend.transport.clone(), model)
    }

    fn run_info(&self) -> Result<RunInfo> {
        artifacts::read_json(&artifacts::require(self.out_dir(), artifacts::RUN, "ingest")?)
    }

    pub fn ingest(&self) -> Result<()> {
        let mut records = Vec::new();
        let mut reports: Vec<LoadReport> = Vec::new();
        let mut ids = HashSet::new();
        for manifest in &self.config.datasets {
            let loaded = load_dataset(manifest).with_context(|| format!("loading dataset {}", manifest.dataset_id))?;
            let selected = match manifest.sample_count {
                Some(n) => select_subset_with(&loaded.records, n, self.config.seeds.subset, manifest.subset_mode)?,
                None => loaded.records,
            };
            for r in &selected {
                if !ids.insert(r.record_id.clone()) {
                    return Err(Error::DuplicateRecord(r.record_id.clone()));
                }
            }
            records.extend(selected);
            reports.push(loaded.report);
        }
        let digest = self.config.digest()?;
        let info = RunInfo {
            run_id: format!("run-{}", &digest[..12]),
            config_digest: digest,
            created_at: self.config.created_at.clone(),
            models: self.config.backend.nli_models.clone(),
            datasets: self.config.datasets.iter().map(|d| d.dataset_id.clone()).collect(),
            k: self.config.k,
            budget: self.config.budget,
            ks_mode: self.config.ks_mode,
            fuzzy_threshold: self.config.fuzzy_threshold,
        };
        artifacts::write_jsonl(&self.path(artifacts::RECORDS), &records)?;
        artifacts::write_json(&self.path(artifacts::LOAD_REPORT), &reports)?;
        artifacts::write_json(&self.path(artifacts::RUN), &info)
    }

    pub fn filter(&self) -> Result<()> {
        let info = self.run_info()?;
        let records: Vec<NliRecord> =
            artifacts::read_jsonl(&artifacts::require(self.out_dir(), artifacts::RECORDS, "ingest")?)?;
        let mut kept = Vec::new();
        let mut accuracy = Vec::new();
        for model in &info.models {
            let classifier = self.classifier(model);
            for dataset in &info.datasets {
                let subset: Vec<NliRecord> = records.iter().filter(|r| &r.dataset_id == dataset).cloned().collect();
                if subset.is_empty() {
                    continue;
                }
                let outcome = filter_correct(&subset, &classifier)?;
                accuracy.push(AccuracyRow {
                    model: model.clone(),
                    dataset_id: dataset.clone(),
                    total: outcome.total,
                    correct: outcome.kept.len(),
                    accuracy: outcome.accuracy,
                });
                kept.extend(outcome.kept.into_iter().map(|f| ModelPrediction {
                    model: model.clone(),
                    record: f.record,
                    prediction: f.prediction,
                }));
            }
        }
        artifacts::write_jsonl(&self.path(artifacts::FILTERED), &kept)?;
        artifacts::write_json(&self.path(artifacts::ACCURACY), &accuracy)
    }

    fn filtered(&self) -> Result<Vec<ModelPrediction>> {
        artifacts::read_jsonl(&artifacts::require(self.out_dir(), artifacts::FILTERED, "filter")?)
    }

    pub fn generate(&self) -> Result<()> {
        let info = self.run_info()?;
        let filtered = self.filtered()?;
        let generator = GeneratorClient::new(self.backend.transport.clone(), &self.config.backend.generation_model);
        let classifiers: BTreeMap<&str, NliClient> =
            info.models.iter().map(|m| (m.as_str(), self.classifier(m))).collect();
        let sets: Vec<VariationSet> = filtered
            .par_iter()
            .map(|f| {
                let classifier = classifiers
                    .get(f.model.as_str())
                    .ok_or_else(|| Error::Consistency(format!("filtered record for unknown model {}", f.model)))?;
                acquire_variations(
                    &f.record,
                    &f.prediction,
                    info.k,
                    info.budget,
                    &self.config.generation,
                    &generator,
                    classifier,
                )
            })
            .collect::<Result<_>>()?;

        let mut rows: BTreeMap<(String, String), GenerationRow> = BTreeMap::new();
        for model in &info.models {
            for dataset in &info.datasets {
                rows.insert(
                    (model.clone(), dataset.clone()),
                    GenerationRow {
                        model: model.clone(),
                        dataset_id: dataset.clone(),
                        ..Default::default()
                    },
                );
            }
        }
        for s in &sets {
            s.validate(info.k)?;
            let row = rows
                .get_mut(&(s.model.clone(), s.dataset_id.clone()))
                .ok_or_else(|| Error::Consistency(format!("variation set for unknown dataset {}", s.dataset_id)))?;
            row.records += 1;
            row.evaluated += usize::from(!s.excluded);
            row.excluded += usize::from(s.excluded);
            row.shortfall += usize::from(s.shortfall && !s.excluded);
            row.accepted += s.accepted.len();
            row.rejected += s.rejected.len();
            row.rounds += u64::from(s.rounds_used);
        }
        let rows: Vec<GenerationRow> = ordered(&info, rows);
        artifacts::write_jsonl(&self.path(artifacts::VARIATIONS), &sets)?;
        artifacts::write_json(&self.path(artifacts::GENERATION_REPORT), &rows)
    }

    fn variations(&self) -> Result<Vec<VariationSet>> {
        artifacts::read_jsonl(&artifacts::require(self.out_dir(), artifacts::VARIATIONS, "generate")?)
    }

    pub fn evaluate(&self) -> Result<()> {
        let info = self.run_info()?;
        let filtered = self.filtered()?;
        let sets = self.variations()?;
        let mut pairs = Vec::new();
        for model in &info.models {
            let originals: Vec<FilteredRecord> = filtered
                .iter()
                .filter(|f| &f.model == model)
                .map(|f| FilteredRecord {
                    record: f.record.clone(),
                    prediction: f.prediction.clone(),
                })
                .collect();
            let model_sets: Vec<VariationSet> = sets.iter().filter(|s| &s.model == model).cloned().collect();
            pairs.extend(evaluate_variations(&model_sets, &originals, &self.classifier(model))?);
        }

        let mut rates = Vec::new();
        for model in &info.models {
            for dataset in &info.datasets {
                let group: Vec<EvaluationPair> = pairs
                    .iter()
                    .filter(|p| &p.model == model && &p.dataset_id == dataset)
                    .cloned()
                    .collect();
                let in_group = |s: &&VariationSet| &s.model == model && &s.dataset_id == dataset;
                let excluded = sets.iter().filter(in_group).filter(|s| s.excluded).count();
                let shortfall = sets.iter().filter(in_group).filter(|s| s.shortfall && !s.excluded).count();
                let rate = FoolingRates {
                    model: model.clone(),
                    dataset_id: dataset.clone(),
                    shortfall,
                    ..fooling_rates(&group, excluded)
                };
                rates.push(rate);
            }
        }
        artifacts::write_jsonl(&self.path(artifacts::PAIRS), &pairs)?;
        artifacts::write_jsonl(&self.path(artifacts::RATES), &rates)
    }

    fn pairs(&self) -> Result<Vec<EvaluationPair>> {
        artifacts::read_jsonl(&artifacts::require(self.out_dir(), artifacts::PAIRS, "evaluate")?)
    }

    pub fn analyze(&self) -> Result<()> {
        let info = self.run_info()?;
        let pairs = self.pairs()?;
        let distances = match &self.config.backend.embedding_model {
            Some(model) => {
                let embedder = EmbedClient::new(self.backend.transport.clone(), model);
                let d: Vec<f64> = pairs
                    .par_iter()
                    .map(|p| {
                        let u = embedder.embed(&p.hypothesis)?;
                        let v = embedder.embed(&p.variation)?;
                        cosine_distance(&u, &v)
                            .with_context(|| format!("cosine distance for {} #{}", p.record_id, p.candidate_index))
                    })
                    .collect::<Result<_>>()?;
                Some(d)
            }
            None => None,
        };
        let overall = group_divergence_analysis(&pairs, distances.as_deref(), info.ks_mode)?;

        let mut groups = Vec::new();
        for model in &info.models {
            for dataset in &info.datasets {
                let idx: Vec<usize> = (0..pairs.len())
                    .filter(|i| &pairs[*i].model == model && &pairs[*i].dataset_id == dataset)
                    .collect();
                let group: Vec<EvaluationPair> = idx.iter().map(|i| pairs[*i].clone()).collect();
                let d: Option<Vec<f64>> = distances.as_ref().map(|d| idx.iter().map(|i| d[*i]).collect());
                let mut analysis = group_divergence_analysis(&group, d.as_deref(), info.ks_mode)?;
                analysis.pairs.clear();
                groups.push(GroupAnalysis {
                    model: model.clone(),
                    dataset_id: dataset.clone(),
                    analysis,
                });
            }
        }

        let mut token_stats = Vec::new();
        for dataset in &info.datasets {
            // a variation judged by several models counts once
            let mut seen = HashSet::new();
            let stats: Vec<PairTokenStats> = pairs
                .iter()
                .filter(|p| &p.dataset_id == dataset && seen.insert((p.record_id.as_str(), p.variation.as_str())))
                .map(|p| token_stats_with(&p.hypothesis, &p.variation, info.fuzzy_threshold))
                .collect();
            token_stats.extend(TokenStats::aggregate(dataset, &stats));
        }

        let statistics = Statistics {
            ks_mode: info.ks_mode,
            overall,
            groups,
            token_stats,
        };
        artifacts::write_json(&self.path(artifacts::STATISTICS), &statistics)
    }

    pub fn report(&self) -> Result<RunReport> {
        let report = report::aggregate(self.out_dir())?;
        artifacts::write_bytes(
            &self.path(artifacts::REPORT_JSON),
            &report::render(&report, ReportFormat::Json)?,
        )?;
        artifacts::write_bytes(
            &self.path(artifacts::REPORT_MD),
            &report::render(&report, ReportFormat::Markdown)?,
        )?;
        artifacts::write_bytes(
            &self.path(artifacts::RATES_CSV),
            &report::render(&report, ReportFormat::Delimited)?,
        )?;
        Ok(report)
    }

    /// Samples annotation tasks from the accepted variations and writes them.
    pub fn annotation_tasks(&self) -> Result<Vec<AnnotationTask>> {
        let sets = self.variations()?;
        let a = &self.config.annotation;
        let n = a.sample.min(sets.iter().map(|s| s.accepted.len()).sum());
        let tasks = sample_for_annotation(&sets, n, self.config.seeds.annotation, &a.annotators)?;
        artifacts::write_jsonl(&self.path(ANNOTATION_TASKS), &tasks)?;
        Ok(tasks)
    }
}

fn ordered(info: &RunInfo, mut rows: BTreeMap<(String, String), GenerationRow>) -> Vec<GenerationRow> {
    let mut out = Vec::new();
    for m in &info.models {
        for d in &info.datasets {
            out.extend(rows.remove(&(m.clone(), d.clone())));
        }
    }
    out
}

/// Checks the config and, for HTTP backends, that every endpoint accepts a
/// TCP connection. Writes nothing.
pub fn dry_run(config: &RunConfig) -> Result<Vec<String>> {
    config.validate()?;
    let mut lines = vec![format!("config ok ({} datasets)", config.datasets.len())];
    match config.backend.kind {
        BackendKind::Mock => {
            let mock = config.backend.mock.as_ref().expect("validated");
            MockBackend::from_config(mock)?;
            lines.push("mock backend tables load".into());
        }
        BackendKind::Http => {
            let timeout = Duration::from_secs_f64(config.backend.timeout_secs.min(5.0));
            for cap in Capability::ALL {
                let Some(endpoint) = config.backend.endpoints.get(cap) else {
                    continue;
                };
                check_reachable(endpoint, timeout).with_context(|| format!("{cap} endpoint"))?;
                lines.push(format!("{cap} endpoint {endpoint} reachable"));
            }
        }
    }
    Ok(lines)
}

fn check_reachable(endpoint: &str, timeout: Duration) -> Result<()> {
    let transport_err = |message: String| Error::Transport {
        endpoint: endpoint.to_string(),
        message,
    };
    let url = url::Url::parse(endpoint).map_err(|e| transport_err(e.to_string()))?;
    let host = url.host_str().ok_or_else(|| transport_err("no host".into()))?;
    let port = url
        .port_or_known_default()
        .ok_or_else(|| transport_err("no port".into()))?;
    let addrs = (host, port).to_socket_addrs().map_err(|e| transport_err(e.to_string()))?;
    let mut last = None;
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(_) => return Ok(()),
            Err(e) => last = Some(e.to_string()),
        }
    }
    Err(transport_err(last.unwrap_or_else(|| "no address".into())))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
out_dir = "out"

[seeds]
subset = 1
annotation = 2

[[datasets]]
dataset_id = "d"
path = "d.jsonl"
format = "jsonl"
labels = { e = "entailment", n = "neutral", c = "contradiction" }

[backend]
kind = "mock"
nli_models = ["m"]
generation_model = "g"
mock = { reflexive = true }
"#;

    #[test]
    fn defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig::from_toml(MINIMAL, dir.path()).unwrap();
        assert_eq!(config.k, 5);
        assert_eq!(config.budget, 10);
        assert_eq!(config.out_dir, dir.path().join("out"));
        assert_eq!(config.datasets[0].path, dir.path().join("d.jsonl"));
        assert_eq!(config.generation, GenerationSettings::default());
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        std::fs::write(dir.path().join("d.jsonl"), "").unwrap();
        config.validate().unwrap();
    }

    #[test]
    fn seeds_are_mandatory() {
        let text = MINIMAL.replace("[seeds]\nsubset = 1\nannotation = 2\n", "");
        assert!(matches!(RunConfig::from_toml(&text, Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn digest_ignores_location() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [&a, &b] {
            std::fs::write(d.path().join("d.jsonl"), "{}\n").unwrap();
        }
        let ca = RunConfig::from_toml(MINIMAL, a.path()).unwrap();
        let cb = RunConfig::from_toml(MINIMAL, b.path()).unwrap();
        assert_eq!(ca.digest().unwrap(), cb.digest().unwrap());
        std::fs::write(b.path().join("d.jsonl"), "{}\n{}\n").unwrap();
        assert_ne!(ca.digest().unwrap(), cb.digest().unwrap());
    }

    #[test]
    fn stage_names() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn missing_predecessor_output() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("d.jsonl"), "").unwrap();
        let config = RunConfig::from_toml(MINIMAL, dir.path()).unwrap();
        let pipeline = Pipeline::new(config).unwrap();
        let err = pipeline.run_stage(Stage::Generate).unwrap_err();
        assert!(matches!(err.root(), Error::MissingInput { .. }), "{err}");
        assert!(dir.path().join("out/generate.incomplete").exists());
    }

    #[test]
    fn dry_run_unreachable_endpoint() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("d.jsonl"), "").unwrap();
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        drop(listener);
        let text = MINIMAL.replace(
            "kind = \"mock\"",
            &format!("kind = \"http\"\nendpoints = {{ nli = \"http://127.0.0.1:{port}\", generate = \"http://127.0.0.1:{port}\" }}"),
        );
        let config = RunConfig::from_toml(&text, dir.path()).unwrap();
        assert!(dry_run(&config).is_err());
        assert!(!dir.path().join("out").exists());
    }
}
