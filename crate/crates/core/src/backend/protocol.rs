//! JSON wire schema for `/v1/nli`, `/v1/generate` and `/v1/embed`.
//!
//! Request validators are strict (exact key set, exact JSON types) so the stub
//! server and mocks reject anything a conforming client would not send.

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::types::LabelDistribution;

use super::{Capability, GenerationParams};

pub const NLI_REQUEST_KEYS: [&str; 3] = ["premise", "hypothesis", "model"];
pub const GENERATE_REQUEST_KEYS: [&str; 7] = [
    "prompt",
    "n",
    "temperature",
    "max_tokens",
    "diversity_penalty",
    "beam_groups",
    "model",
];
pub const EMBED_REQUEST_KEYS: [&str; 2] = ["text", "model"];

pub fn nli_request(premise: &str, hypothesis: &str, model: &str) -> Value {
    json!({ "premise": premise, "hypothesis": hypothesis, "model": model })
}

pub fn generate_request(prompt: &str, params: &GenerationParams, model: &str) -> Value {
    json!({
        "prompt": prompt,
        "n": params.num_candidates,
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
        "diversity_penalty": params.diversity_penalty,
        "beam_groups": params.beam_groups,
        "model": model,
    })
}

pub fn embed_request(text: &str, model: &str) -> Value {
    json!({ "text": text, "model": model })
}

pub fn error_body(message: &str) -> Value {
    json!({ "error": message })
}

fn object<'a>(v: &'a Value, what: &str) -> std::result::Result<&'a Map<String, Value>, String> {
    v.as_object().ok_or_else(|| format!("{what} must be a JSON object"))
}

fn exact_keys(map: &Map<String, Value>, keys: &[&str]) -> std::result::Result<(), String> {
    for key in keys {
        if !map.contains_key(*key) {
            return Err(format!("missing field `{key}`"));
        }
    }
    if let Some(extra) = map.keys().find(|k| !keys.contains(&k.as_str())) {
        return Err(format!("unexpected field `{extra}`"));
    }
    Ok(())
}

fn string(map: &Map<String, Value>, key: &str) -> std::result::Result<(), String> {
    match map.get(key) {
        Some(Value::String(_)) => Ok(()),
        _ => Err(format!("field `{key}` must be a string")),
    }
}

fn unsigned(map: &Map<String, Value>, key: &str) -> std::result::Result<(), String> {
    match map.get(key) {
        Some(v) if v.is_u64() => Ok(()),
        _ => Err(format!("field `{key}` must be a non-negative integer")),
    }
}

fn number(map: &Map<String, Value>, key: &str) -> std::result::Result<(), String> {
    match map.get(key) {
        Some(Value::Number(_)) => Ok(()),
        _ => Err(format!("field `{key}` must be a number")),
    }
}

/// Checks a request body against the schema of `capability`.
pub fn validate_request(capability: Capability, body: &Value) -> std::result::Result<(), String> {
    let map = object(body, "request body")?;
    match capability {
        Capability::Nli => {
            exact_keys(map, &NLI_REQUEST_KEYS)?;
            NLI_REQUEST_KEYS.iter().try_for_each(|k| string(map, k))
        }
        Capability::Generate => {
            exact_keys(map, &GENERATE_REQUEST_KEYS)?;
            string(map, "prompt")?;
            string(map, "model")?;
            unsigned(map, "n")?;
            unsigned(map, "max_tokens")?;
            unsigned(map, "beam_groups")?;
            number(map, "temperature")?;
            number(map, "diversity_penalty")
        }
        Capability::Embed => {
            exact_keys(map, &EMBED_REQUEST_KEYS)?;
            EMBED_REQUEST_KEYS.iter().try_for_each(|k| string(map, k))
        }
    }
}

/// Checks a success response against the schema of `capability`.
///
/// Only structure is checked here; the NLI probability invariants are enforced
/// by [`parse_nli_response`].
pub fn validate_response(capability: Capability, body: &Value) -> std::result::Result<(), String> {
    let map = object(body, "response body")?;
    match capability {
        Capability::Nli => {
            exact_keys(map, &["probs"])?;
            let probs = object(&map["probs"], "`probs`")?;
            exact_keys(probs, &["entailment", "neutral", "contradiction"])?;
            ["entailment", "neutral", "contradiction"]
                .iter()
                .try_for_each(|k| number(probs, k))
        }
        Capability::Generate => {
            exact_keys(map, &["candidates"])?;
            match &map["candidates"] {
                Value::Array(items) if items.iter().all(Value::is_string) => Ok(()),
                _ => Err("`candidates` must be an array of strings".into()),
            }
        }
        Capability::Embed => {
            exact_keys(map, &["vector"])?;
            match &map["vector"] {
                Value::Array(items) if items.iter().all(Value::is_number) => Ok(()),
                _ => Err("`vector` must be an array of numbers".into()),
            }
        }
    }
}

/// Checks a non-2xx body: `{"error": str}`.
pub fn validate_error(body: &Value) -> std::result::Result<(), String> {
    let map = object(body, "error body")?;
    exact_keys(map, &["error"])?;
    string(map, "error")
}

pub fn parse_nli_response(body: &Value) -> Result<LabelDistribution> {
    validate_response(Capability::Nli, body).map_err(Error::MalformedResponse)?;
    let probs = &body["probs"];
    let get = |k: &str| probs[k].as_f64().unwrap_or(f64::NAN);
    LabelDistribution::new(get("entailment"), get("neutral"), get("contradiction"))
        .map_err(|e| Error::MalformedResponse(e.to_string()))
}

pub fn parse_generate_response(body: &Value) -> Result<Vec<String>> {
    validate_response(Capability::Generate, body).map_err(Error::MalformedResponse)?;
    Ok(body["candidates"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|v| v.as_str().map(str::to_string))
        .collect())
}

pub fn parse_embed_response(body: &Value) -> Result<Vec<f64>> {
    validate_response(Capability::Embed, body).map_err(Error::MalformedResponse)?;
    let vector: Vec<f64> = body["vector"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(Value::as_f64)
        .collect();
    if vector.is_empty() || vector.iter().any(|x| !x.is_finite()) {
        return Err(Error::MalformedResponse("`vector` must be non-empty and finite".into()));
    }
    Ok(vector)
}
