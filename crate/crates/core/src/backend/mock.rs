//! Deterministic in-process backends speaking the wire protocol.
//!
//! Mocks answer with the same JSON a remote service would, so caching,
//! parsing and validation run unchanged against them.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::{canonical_input, tokens};
use crate::types::{LabelDistribution, WireProbs};

use super::{prompt_hypothesis, protocol, Capability, MockConfig, Transport, WireRequest};

/// A failed request as seen on the wire: HTTP status plus `{"error"}` message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceError {
    pub status: u16,
    pub message: String,
}

impl ServiceError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        ServiceError {
            status: 400,
            message: message.into(),
        }
    }
}

/// Server-side handler for the three endpoints.
pub trait Service: Send + Sync {
    fn handle(&self, capability: Capability, body: &Value) -> std::result::Result<Value, ServiceError>;
}

impl<F> Service for F
where
    F: Fn(Capability, &Value) -> std::result::Result<Value, ServiceError> + Send + Sync,
{
    fn handle(&self, capability: Capability, body: &Value) -> std::result::Result<Value, ServiceError> {
        self(capability, body)
    }
}

/// Lookup-table classifier.
///
/// Keys are canonicalized `(premise, hypothesis)` pairs, optionally scoped to
/// one model id. Unknown pairs get `default`.
#[derive(Debug, Clone)]
pub struct MockNli {
    table: HashMap<(Option<String>, String, String), [f64; 3]>,
    default: [f64; 3],
    reflexive: bool,
}

impl Default for MockNli {
    fn default() -> Self {
        MockNli {
            table: HashMap::new(),
            default: LabelDistribution::uniform().probs(),
            reflexive: false,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NliRow {
    premise: String,
    hypothesis: String,
    probs: WireProbs,
    #[serde(default)]
    model: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorRow {
    hypothesis: String,
    rounds: Vec<Vec<String>>,
}

impl MockNli {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_default(mut self, probs: [f64; 3]) -> Self {
        self.default = probs;
        self
    }

    /// Identical premise and hypothesis yield certain entailment.
    pub fn reflexive(mut self, on: bool) -> Self {
        self.reflexive = on;
        self
    }

    pub fn insert(&mut self, premise: &str, hypothesis: &str, probs: [f64; 3]) {
        self.table
            .insert((None, canonical_input(premise), canonical_input(hypothesis)), probs);
    }

    pub fn insert_for_model(&mut self, model: &str, premise: &str, hypothesis: &str, probs: [f64; 3]) {
        self.table.insert(
            (Some(model.to_string()), canonical_input(premise), canonical_input(hypothesis)),
            probs,
        );
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Reads `{"premise", "hypothesis", "probs", "model"?}` rows.
    pub fn load(path: &Path) -> Result<Self> {
        let mut mock = MockNli::new();
        for (line, row) in jsonl::<NliRow>(path)? {
            let probs = LabelDistribution::try_from(row.probs)
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: e.to_string(),
                })?
                .probs();
            match row.model {
                Some(m) => mock.insert_for_model(&m, &row.premise, &row.hypothesis, probs),
                None => mock.insert(&row.premise, &row.hypothesis, probs),
            }
        }
        Ok(mock)
    }

    pub fn lookup(&self, model: &str, premise: &str, hypothesis: &str) -> [f64; 3] {
        let p = canonical_input(premise);
        let h = canonical_input(hypothesis);
        if let Some(v) = self.table.get(&(Some(model.to_string()), p.clone(), h.clone())) {
            return *v;
        }
        if let Some(v) = self.table.get(&(None, p.clone(), h.clone())) {
            return *v;
        }
        if self.reflexive && p == h {
            return [1.0, 0.0, 0.0];
        }
        self.default
    }
}

/// Scripted paraphrase generator.
///
/// Each hypothesis maps to a list of rounds. The n-th request for a prompt
/// returns round n (an empty list once the script is exhausted), modelling a
/// sampler that yields fresh candidates per call.
#[derive(Debug, Default)]
pub struct MockGenerator {
    script: HashMap<String, Vec<Vec<String>>>,
    served: Mutex<HashMap<String, usize>>,
}

impl MockGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, hypothesis: &str, rounds: Vec<Vec<String>>) {
        self.script.insert(canonical_input(hypothesis), rounds);
    }

    /// Reads `{"hypothesis", "rounds"}` rows.
    pub fn load(path: &Path) -> Result<Self> {
        let mut mock = MockGenerator::new();
        for (_, row) in jsonl::<GeneratorRow>(path)? {
            mock.insert(&row.hypothesis, row.rounds);
        }
        Ok(mock)
    }

    pub fn next(&self, hypothesis: &str, n: usize) -> Vec<String> {
        let key = canonical_input(hypothesis);
        let round = {
            let mut served = self.served.lock().expect("generator lock");
            let counter = served.entry(key.clone()).or_insert(0);
            let round = *counter;
            *counter += 1;
            round
        };
        self.script
            .get(&key)
            .and_then(|rounds| rounds.get(round))
            .map(|c| c.iter().take(n).cloned().collect())
            .unwrap_or_default()
    }
}

/// Bag-of-hashed-tokens embedder: each token adds ±1 to a SHA-256-chosen slot.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder { dim: dim.max(1) }
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in tokens(text) {
            let digest = Sha256::digest(token.as_bytes());
            let word = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            let slot = (word % self.dim as u64) as usize;
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[slot] += sign;
        }
        v
    }
}

/// The three mocks behind one [`Service`].
#[derive(Default)]
pub struct MockBackend {
    pub nli: Option<MockNli>,
    pub generator: Option<MockGenerator>,
    pub embedder: Option<HashEmbedder>,
}

impl MockBackend {
    pub fn from_config(config: &MockConfig) -> Result<Self> {
        let mut nli = match &config.nli_table {
            Some(path) => MockNli::load(path)?,
            None => MockNli::new(),
        };
        if let Some(d) = config.nli_default {
            nli = nli.with_default(d);
        }
        nli = nli.reflexive(config.reflexive);
        let generator = match &config.generator_table {
            Some(path) => MockGenerator::load(path)?,
            None => MockGenerator::new(),
        };
        Ok(MockBackend {
            nli: Some(nli),
            generator: Some(generator),
            embedder: Some(HashEmbedder::new(config.embed_dim)),
        })
    }
}

impl Service for MockBackend {
    fn handle(&self, capability: Capability, body: &Value) -> std::result::Result<Value, ServiceError> {
        protocol::validate_request(capability, body).map_err(ServiceError::bad_request)?;
        let unavailable = || ServiceError {
            status: 404,
            message: format!("capability `{capability}` not configured"),
        };
        let field = |k: &str| body[k].as_str().unwrap_or_default();
        match capability {
            Capability::Nli => {
                let nli = self.nli.as_ref().ok_or_else(unavailable)?;
                let [e, n, c] = nli.lookup(field("model"), field("premise"), field("hypothesis"));
                Ok(json!({"probs": {"entailment": e, "neutral": n, "contradiction": c}}))
            }
            Capability::Generate => {
                let generator = self.generator.as_ref().ok_or_else(unavailable)?;
                let prompt = field("prompt");
                let hypothesis = prompt_hypothesis(prompt)
                    .ok_or_else(|| ServiceError::bad_request("prompt does not follow the template"))?;
                let n = body["n"].as_u64().unwrap_or(0) as usize;
                Ok(json!({"candidates": generator.next(hypothesis, n)}))
            }
            Capability::Embed => {
                let embedder = self.embedder.as_ref().ok_or_else(unavailable)?;
                Ok(json!({"vector": embedder.embed(field("text"))}))
            }
        }
    }
}

/// In-process transport over a [`Service`], counting calls and concurrency.
pub struct MockTransport {
    service: Arc<dyn Service>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    delay: Duration,
}

impl MockTransport {
    pub fn new(service: Arc<dyn Service>) -> Self {
        MockTransport {
            service,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            delay: Duration::ZERO,
        }
    }

    /// Holds each call open for `delay`, making overlap observable.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl Transport for MockTransport {
    fn call(&self, request: &WireRequest) -> Result<Value> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let result = self.service.handle(request.capability, &request.body);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result.map_err(|e| Error::Backend {
            status: e.status,
            message: e.message,
        })
    }
}

fn jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Classifier, Embedder, EmbedClient, GenerationParams, Generator, GeneratorClient, NliClient};

    fn transport(backend: MockBackend) -> Arc<MockTransport> {
        Arc::new(MockTransport::new(Arc::new(backend)))
    }

    #[test]
    fn lookup_and_default() {
        let mut nli = MockNli::new();
        nli.insert("A", "B", [0.9, 0.05, 0.05]);
        let t = transport(MockBackend {
            nli: Some(nli),
            ..Default::default()
        });
        let client = NliClient::new(t.clone(), "m");
        assert_eq!(client.classify("A", "B").unwrap().probs(), [0.9, 0.05, 0.05]);
        assert_eq!(client.classify("A", "C").unwrap(), LabelDistribution::uniform());
        assert_eq!(t.calls(), 2);
    }

    #[test]
    fn model_scoped_entries_win() {
        let mut nli = MockNli::new();
        nli.insert("A", "B", [0.9, 0.05, 0.05]);
        nli.insert_for_model("other", "A", "B", [0.05, 0.05, 0.9]);
        assert_eq!(nli.lookup("m", "A", "B"), [0.9, 0.05, 0.05]);
        assert_eq!(nli.lookup("other", "A", "B"), [0.05, 0.05, 0.9]);
    }

    #[test]
    fn generator_serves_rounds_in_order() {
        let mut generator = MockGenerator::new();
        let h = "the sweat had built up on his face";
        let rewrites: Vec<String> = [
            "sweat had accumulated on his face",
            "his face was covered in built-up sweat",
            "the perspiration had built up on his face",
            "sweat had gathered on his face",
            "his face had sweat building up on it",
        ]
        .map(String::from)
        .to_vec();
        generator.insert(h, vec![rewrites.clone()]);
        let t = transport(MockBackend {
            generator: Some(generator),
            ..Default::default()
        });
        let client = GeneratorClient::new(t, "g");
        let params = GenerationParams::default();
        assert_eq!(client.generate_candidates(h, &params, 0).unwrap(), rewrites);
        assert!(matches!(client.generate_candidates(h, &params, 1), Err(Error::EmptyGeneration)));
    }

    #[test]
    fn hash_embedder_is_deterministic() {
        let t = transport(MockBackend {
            embedder: Some(HashEmbedder::new(32)),
            ..Default::default()
        });
        let client = EmbedClient::new(t, "e");
        let a = client.embed("A dog runs.").unwrap();
        assert_eq!(a, client.embed("a dog runs").unwrap());
        assert_eq!(a.len(), 32);
        assert_eq!(client.dimension(), Some(32));
    }

    #[test]
    fn dimension_mismatch_detected() {
        let service = |_: Capability, body: &Value| -> std::result::Result<Value, ServiceError> {
            let len = body["text"].as_str().unwrap().len();
            Ok(json!({"vector": vec![1.0; len]}))
        };
        let client = EmbedClient::new(Arc::new(MockTransport::new(Arc::new(service))), "e");
        client.embed("ab").unwrap();
        assert!(matches!(
            client.embed("abc"),
            Err(Error::DimensionMismatch { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn invalid_request_rejected_by_mock() {
        let t = transport(MockBackend::default());
        let err = t
            .call(&WireRequest {
                capability: Capability::Nli,
                model: "m".into(),
                body: json!({"premise": "a"}),
                attempt: 0,
            })
            .unwrap_err();
        assert!(matches!(err, Error::Backend { status: 400, .. }));
    }
}
