//! Access to classification, paraphrase generation and sentence embedding.
//!
//! Every capability is reached through a [`Transport`] that exchanges raw wire
//! JSON. Transports compose: [`http::HttpTransport`] or [`mock::MockTransport`]
//! at the bottom, [`limit::Throttled`] to bound in-flight requests, and
//! [`cache::CachedTransport`] on top so cache hits never touch the network.
//! The typed clients ([`NliClient`], [`GeneratorClient`], [`EmbedClient`])
//! build requests, canonicalize text and validate responses.

pub mod cache;
pub mod http;
pub mod limit;
pub mod mock;
pub mod protocol;
pub mod stub;

use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::text::canonical_input;
use crate::types::LabelDistribution;

pub use cache::{CacheStats, CachedTransport, ResponseCache};
pub use http::HttpTransport;
pub use limit::Throttled;
pub use mock::{HashEmbedder, MockBackend, MockGenerator, MockNli, MockTransport, Service, ServiceError};
pub use stub::StubServer;

/// Instruction used to ask the generator for a paraphrase.
pub const PROMPT_PREFIX: &str = "Rephrase the following sentence while preserving its original meaning: ";

/// Generation prompt with `hypothesis` substituted into the template.
pub fn build_prompt(hypothesis: &str) -> String {
    format!("{PROMPT_PREFIX}{hypothesis}.")
}

/// Inverse of [`build_prompt`], used by mock generators.
pub fn prompt_hypothesis(prompt: &str) -> Option<&str> {
    prompt.strip_prefix(PROMPT_PREFIX)?.strip_suffix('.')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Nli,
    Generate,
    Embed,
}

impl Capability {
    pub const ALL: [Capability; 3] = [Capability::Nli, Capability::Generate, Capability::Embed];

    pub fn path(self) -> &'static str {
        match self {
            Capability::Nli => "/v1/nli",
            Capability::Generate => "/v1/generate",
            Capability::Embed => "/v1/embed",
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Capability::Nli => "nli",
            Capability::Generate => "generate",
            Capability::Embed => "embed",
        }
    }

    pub fn parse(s: &str) -> Option<Capability> {
        Capability::ALL.into_iter().find(|c| c.tag() == s)
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One request on the wire.
///
/// `attempt` never leaves the process: it separates cache entries for repeated
/// sampling of the same generation request.
#[derive(Debug, Clone, PartialEq)]
pub struct WireRequest {
    pub capability: Capability,
    pub model: String,
    pub body: Value,
    pub attempt: u32,
}

pub trait Transport: Send + Sync {
    /// Sends `request` and returns the raw success body.
    fn call(&self, request: &WireRequest) -> Result<Value>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn call(&self, request: &WireRequest) -> Result<Value> {
        (**self).call(request)
    }
}

/// Decoding controls forwarded opaquely to the generation backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub num_candidates: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub diversity_penalty: f64,
    pub beam_groups: usize,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            num_candidates: 8,
            temperature: 0.3,
            max_tokens: 40,
            diversity_penalty: 0.5,
            beam_groups: 4,
        }
    }
}

/// Linear temperature sweep over refinement rounds, `min` on round 0 and
/// `max` on the last budgeted round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureRange {
    pub min: f64,
    pub max: f64,
}

impl Default for TemperatureRange {
    fn default() -> Self {
        TemperatureRange { min: 0.3, max: 0.6 }
    }
}

impl TemperatureRange {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.min <= self.max && self.max.is_finite()) {
            return Err(Error::Config(format!(
                "temperature range [{}, {}] is invalid",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn for_round(&self, round: u32, budget: u32) -> f64 {
        if budget <= 1 {
            return self.min;
        }
        let t = f64::from(round.min(budget - 1)) / f64::from(budget - 1);
        self.min + (self.max - self.min) * t
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.min - 1e-12 && t <= self.max + 1e-12
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Http,
    Mock,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub nli: Option<String>,
    pub generate: Option<String>,
    pub embed: Option<String>,
}

impl Endpoints {
    pub fn get(&self, capability: Capability) -> Option<&str> {
        match capability {
            Capability::Nli => self.nli.as_deref(),
            Capability::Generate => self.generate.as_deref(),
            Capability::Embed => self.embed.as_deref(),
        }
    }

    pub fn set(&mut self, capability: Capability, url: String) {
        match capability {
            Capability::Nli => self.nli = Some(url),
            Capability::Generate => self.generate = Some(url),
            Capability::Embed => self.embed = Some(url),
        }
    }
}

/// Files backing the offline mock backend.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockConfig {
    /// JSONL of `{"premise", "hypothesis", "probs", "model"?}` rows.
    pub nli_table: Option<PathBuf>,
    /// Response for pairs missing from the table; uniform when absent.
    pub nli_default: Option<[f64; 3]>,
    /// Identical premise and hypothesis classify as certain entailment.
    #[serde(default)]
    pub reflexive: bool,
    /// JSONL of `{"hypothesis", "rounds": [[candidate, ...], ...]}` rows.
    pub generator_table: Option<PathBuf>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

fn default_embed_dim() -> usize {
    64
}

fn default_timeout() -> f64 {
    30.0
}
fn default_inflight() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoints: Endpoints,
    /// Classifiers under evaluation; each also judges its own variation candidates.
    pub nli_models: Vec<String>,
    pub generation_model: String,
    #[serde(default)]
    pub embedding_model: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default)]
    pub mock: Option<MockConfig>,
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(Error::Config("backend.timeout_secs must be > 0".into()));
        }
        if self.max_inflight < 1 {
            return Err(Error::Config("backend.max_inflight must be >= 1".into()));
        }
        if self.nli_models.is_empty() {
            return Err(Error::Config("backend.nli_models must list at least one model".into()));
        }
        match self.kind {
            BackendKind::Http => {
                for cap in [Capability::Nli, Capability::Generate] {
                    if self.endpoints.get(cap).is_none() {
                        return Err(Error::Config(format!("backend.endpoints.{cap} is required")));
                    }
                }
                if self.embedding_model.is_some() && self.endpoints.embed.is_none() {
                    return Err(Error::Config(
                        "backend.endpoints.embed is required when embedding_model is set".into(),
                    ));
                }
            }
            BackendKind::Mock => {
                if self.mock.is_none() {
                    return Err(Error::Config("backend.mock is required for kind = \"mock\"".into()));
                }
            }
        }
        Ok(())
    }
}

/// The NLI model under test.
pub trait Classifier: Send + Sync {
    fn model(&self) -> &str;
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<LabelDistribution>;
}

/// Paraphrase generator. `round` distinguishes repeated samples of one prompt.
pub trait Generator: Send + Sync {
    fn generate_candidates(
        &self,
        hypothesis: &str,
        params: &GenerationParams,
        round: u32,
    ) -> Result<Vec<String>>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

fn non_empty(text: &str, what: &str) -> Result<String> {
    let canonical = canonical_input(text);
    if canonical.is_empty() {
        return Err(Error::Precondition(format!("{what} is empty")));
    }
    Ok(canonical)
}

pub struct NliClient {
    transport: Arc<dyn Transport>,
    model: String,
}

impl NliClient {
    pub fn new(transport: Arc<dyn Transport>, model: impl Into<String>) -> Self {
        NliClient {
            transport,
            model: model.into(),
        }
    }
}

impl Classifier for NliClient {
    fn model(&self) -> &str {
        &self.model
    }

    fn classify(&self, premise: &str, hypothesis: &str) -> Result<LabelDistribution> {
        let premise = non_empty(premise, "premise")?;
        let hypothesis = non_empty(hypothesis, "hypothesis")?;
        let request = WireRequest {
            capability: Capability::Nli,
            model: self.model.clone(),
            body: protocol::nli_request(&premise, &hypothesis, &self.model),
            attempt: 0,
        };
        protocol::parse_nli_response(&self.transport.call(&request)?)
    }
}

pub struct GeneratorClient {
    transport: Arc<dyn Transport>,
    model: String,
}

impl GeneratorClient {
    pub fn new(transport: Arc<dyn Transport>, model: impl Into<String>) -> Self {
        GeneratorClient {
            transport,
            model: model.into(),
        }
    }
}

impl Generator for GeneratorClient {
    /// Candidates are trimmed, empty ones dropped, and the list capped at
    /// `num_candidates`. Duplicates are kept.
    fn generate_candidates(
        &self,
        hypothesis: &str,
        params: &GenerationParams,
        round: u32,
    ) -> Result<Vec<String>> {
        if params.num_candidates == 0 {
            return Err(Error::Precondition("num_candidates must be >= 1".into()));
        }
        if params.max_tokens == 0 {
            return Err(Error::Precondition("max_tokens must be >= 1".into()));
        }
        let hypothesis = non_empty(hypothesis, "hypothesis")?;
        let request = WireRequest {
            capability: Capability::Generate,
            model: self.model.clone(),
            body: protocol::generate_request(&build_prompt(&hypothesis), params, &self.model),
            attempt: round,
        };
        let raw = protocol::parse_generate_response(&self.transport.call(&request)?)?;
        let candidates: Vec<String> = raw
            .iter()
            .map(|c| c.trim())
            .filter(|c| !c.is_empty())
            .take(params.num_candidates)
            .map(str::to_string)
            .collect();
        if candidates.is_empty() {
            return Err(Error::EmptyGeneration);
        }
        Ok(candidates)
    }
}

pub struct EmbedClient {
    transport: Arc<dyn Transport>,
    model: String,
    dimension: OnceLock<usize>,
}

impl EmbedClient {
    pub fn new(transport: Arc<dyn Transport>, model: impl Into<String>) -> Self {
        EmbedClient {
            transport,
            model: model.into(),
            dimension: OnceLock::new(),
        }
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension.get().copied()
    }
}

impl Embedder for EmbedClient {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let text = non_empty(text, "text")?;
        let request = WireRequest {
            capability: Capability::Embed,
            model: self.model.clone(),
            body: protocol::embed_request(&text, &self.model),
            attempt: 0,
        };
        let vector = protocol::parse_embed_response(&self.transport.call(&request)?)?;
        let expected = *self.dimension.get_or_init(|| vector.len());
        if vector.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: vector.len(),
            });
        }
        Ok(vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    struct Fixed(Value);

    impl Transport for Fixed {
        fn call(&self, _: &WireRequest) -> Result<Value> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn prompt_round_trip() {
        let p = build_prompt("the sweat had built up on his face");
        assert_eq!(
            p,
            "Rephrase the following sentence while preserving its original meaning: the sweat had built up on his face."
        );
        assert_eq!(prompt_hypothesis(&p), Some("the sweat had built up on his face"));
    }

    #[test]
    fn zero_candidates_is_precondition_error() {
        let g = GeneratorClient::new(Arc::new(Fixed(json!({"candidates": ["x"]}))), "g");
        let params = GenerationParams {
            num_candidates: 0,
            ..Default::default()
        };
        assert!(matches!(g.generate_candidates("h", &params, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn duplicates_preserved_blanks_dropped() {
        let g = GeneratorClient::new(
            Arc::new(Fixed(json!({"candidates": [" a ", "a", "  ", "b"]}))),
            "g",
        );
        let out = g.generate_candidates("h", &GenerationParams::default(), 0).unwrap();
        assert_eq!(out, vec!["a", "a", "b"]);
    }

    #[test]
    fn empty_generation_is_retryable() {
        let g = GeneratorClient::new(Arc::new(Fixed(json!({"candidates": []}))), "g");
        let err = g.generate_candidates("h", &GenerationParams::default(), 0).unwrap_err();
        assert!(matches!(err, Error::EmptyGeneration));
        assert!(err.is_retryable());
    }

    #[test]
    fn embed_rejects_empty_text() {
        let e = EmbedClient::new(Arc::new(Fixed(json!({"vector": [1.0]}))), "e");
        assert!(matches!(e.embed("   "), Err(Error::Precondition(_))));
    }

    #[test]
    fn temperature_sweep() {
        let r = TemperatureRange::default();
        assert_eq!(r.for_round(0, 10), 0.3);
        assert!((r.for_round(9, 10) - 0.6).abs() < 1e-12);
        assert!(r.contains(r.for_round(4, 10)));
        assert_eq!(r.for_round(3, 1), 0.3);
    }
}
