//! Python bindings for `semsense`.
//!
//! Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use semsense_core::analysis;
use semsense_core::metrics::{self, EvaluationPair};
use semsense_core::pipeline::{selftest as core_selftest, Pipeline, RunConfig};
use semsense_core::report::{self, ReportFormat};
use semsense_core::{annotation, variation, Error};

fn value_error(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_error(e: Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn label(s: &str) -> PyResult<semsense_core::Label> {
    semsense_core::Label::parse(s).ok_or_else(|| PyValueError::new_err(format!("unknown label `{s}`")))
}

/// A probability distribution over (entailment, neutral, contradiction).
#[pyclass(frozen, skip_from_py_object, module = "semsense")]
#[derive(Clone, Copy)]
struct LabelDistribution(semsense_core::LabelDistribution);

#[pymethods]
impl LabelDistribution {
    #[new]
    fn new(entailment: f64, neutral: f64, contradiction: f64) -> PyResult<Self> {
        semsense_core::LabelDistribution::new(entailment, neutral, contradiction)
            .map(Self)
            .map_err(value_error)
    }

    #[staticmethod]
    fn one_hot(label_name: &str) -> PyResult<Self> {
        Ok(Self(semsense_core::LabelDistribution::one_hot(label(label_name)?)))
    }

    #[staticmethod]
    fn uniform() -> Self {
        Self(semsense_core::LabelDistribution::uniform())
    }

    #[getter]
    fn probs(&self) -> (f64, f64, f64) {
        let [e, n, c] = self.0.probs();
        (e, n, c)
    }

    /// Predicted label; ties go to the earlier of entailment, neutral, contradiction.
    fn argmax(&self) -> &'static str {
        self.0.argmax().name()
    }

    fn softmax_std(&self) -> f64 {
        analysis::softmax_std(&self.0)
    }

    fn __repr__(&self) -> String {
        let [e, n, c] = self.0.probs();
        format!("LabelDistribution({e}, {n}, {c})")
    }

    fn __eq__(&self, other: PyRef<'_, Self>) -> bool {
        self.0 == other.0
    }
}

/// Jensen-Shannon divergence in bits.
#[pyfunction]
fn jsd(p: PyRef<'_, LabelDistribution>, q: PyRef<'_, LabelDistribution>) -> f64 {
    analysis::js_divergence(&p.0, &q.0)
}

/// KL divergence in bits; raises if `q` is zero where `p` is not.
#[pyfunction]
fn kl(p: PyRef<'_, LabelDistribution>, q: PyRef<'_, LabelDistribution>) -> PyResult<f64> {
    analysis::kl_divergence(&p.0, &q.0).map_err(value_error)
}

/// Largest gap between the cumulative label distributions.
#[pyfunction]
fn ks_discrete(p: PyRef<'_, LabelDistribution>, q: PyRef<'_, LabelDistribution>) -> f64 {
    analysis::ks_statistic_discrete(&p.0, &q.0)
}

#[pyfunction]
fn ks_two_sample(a: Vec<f64>, b: Vec<f64>) -> Option<f64> {
    analysis::ks_two_sample(&a, &b)
}

#[pyfunction]
fn cosine_distance(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    analysis::cosine_distance(&u, &v).map_err(value_error)
}

/// "strict", "relaxed" or "none".
#[pyfunction]
fn flip_type(original: &str, varied: &str) -> PyResult<&'static str> {
    Ok(match metrics::flip_type(label(original)?, label(varied)?) {
        metrics::Flip::Strict => "strict",
        metrics::Flip::Relaxed => "relaxed",
        metrics::Flip::None => "none",
    })
}

#[pyfunction]
fn symmetric_entailment(forward: PyRef<'_, LabelDistribution>, backward: PyRef<'_, LabelDistribution>) -> bool {
    variation::symmetric_entailment(&forward.0, &backward.0)
}

#[pyfunction]
#[pyo3(signature = (h, h_prime, threshold = analysis::DEFAULT_FUZZY_THRESHOLD))]
fn token_stats<'py>(py: Python<'py>, h: &str, h_prime: &str, threshold: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &analysis::token_stats_with(h, h_prime, threshold))
}

/// Fooling rates from `(record_id, gold, original_label, variation_label)` rows.
#[pyfunction]
fn fooling_rates<'py>(py: Python<'py>, rows: Vec<(String, String, String, String)>) -> PyResult<Bound<'py, PyAny>> {
    let mut pairs = Vec::with_capacity(rows.len());
    for (i, (record_id, gold, original, varied)) in rows.into_iter().enumerate() {
        let (original, varied) = (label(&original)?, label(&varied)?);
        pairs.push(EvaluationPair {
            model: String::new(),
            dataset_id: String::new(),
            record_id,
            gold: label(&gold)?,
            candidate_index: i + 1,
            hypothesis: String::new(),
            variation: String::new(),
            original_distribution: semsense_core::LabelDistribution::one_hot(original),
            original_label: original,
            variation_distribution: semsense_core::LabelDistribution::one_hot(varied),
            variation_label: varied,
            flip: metrics::flip_type(original, varied),
        });
    }
    to_py(py, &metrics::fooling_rates(&pairs, 0))
}

#[pyfunction]
fn cohens_kappa(a: Vec<bool>, b: Vec<bool>) -> PyResult<f64> {
    annotation::cohens_kappa(&a, &b).map_err(value_error)
}

#[pyfunction]
fn agreement<'py>(py: Python<'py>, a: Vec<bool>, b: Vec<bool>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &annotation::agreement_report(&a, &b).map_err(value_error)?)
}

/// Runs every stage for a TOML config and returns the report.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn run_pipeline<'py>(py: Python<'py>, config: PathBuf, out_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let report = py
        .detach(|| {
            let mut config = RunConfig::load(&config)?;
            if let Some(dir) = out_dir {
                config.out_dir = dir;
            }
            let pipeline = Pipeline::new(config)?;
            pipeline.run_all()?;
            pipeline.report()
        })
        .map_err(runtime_error)?;
    to_py(py, &report)
}

/// Re-renders the report held in a finished run directory.
#[pyfunction]
#[pyo3(signature = (out_dir, format = "markdown"))]
fn render_report(out_dir: PathBuf, format: &str) -> PyResult<String> {
    let format: ReportFormat = format.parse().map_err(value_error)?;
    let report = report::aggregate(&out_dir).map_err(runtime_error)?;
    let bytes = report::render(&report, format).map_err(runtime_error)?;
    String::from_utf8(bytes).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Fixture run against the golden report, written under `work_dir`.
#[pyfunction]
fn selftest<'py>(py: Python<'py>, work_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let outcome = py.detach(|| core_selftest::run(&work_dir)).map_err(runtime_error)?;
    let weighted = outcome.cold.report.weighted.first();
    let summary = serde_json::json!({
        "passed": outcome.passed(),
        "golden_json_matches": outcome.golden_json_matches,
        "golden_md_matches": outcome.golden_md_matches,
        "warm_identical": outcome.warm_identical(),
        "cold_backend_calls": outcome.cold.stats.backend_calls,
        "warm_backend_calls": outcome.warm.stats.backend_calls,
        "r_s": weighted.and_then(|w| w.r_s),
        "r_r": weighted.and_then(|w| w.r_r),
    });
    to_py(py, &summary)
}

#[pymodule]
fn semsense(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<LabelDistribution>()?;
    m.add_function(wrap_pyfunction!(jsd, m)?)?;
    m.add_function(wrap_pyfunction!(kl, m)?)?;
    m.add_function(wrap_pyfunction!(ks_discrete, m)?)?;
    m.add_function(wrap_pyfunction!(ks_two_sample, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_distance, m)?)?;
    m.add_function(wrap_pyfunction!(flip_type, m)?)?;
    m.add_function(wrap_pyfunction!(symmetric_entailment, m)?)?;
    m.add_function(wrap_pyfunction!(token_stats, m)?)?;
    m.add_function(wrap_pyfunction!(fooling_rates, m)?)?;
    m.add_function(wrap_pyfunction!(cohens_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(agreement, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add("SIGMA_MAX", 2f64.sqrt() / 3.0)?;
    Ok(())
}
