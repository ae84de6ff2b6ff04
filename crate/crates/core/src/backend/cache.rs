//! Persistent append-only response cache.
//!
//! Each line of the cache file is one JSON object:
//!
//! ```text
//! {"capability":"nli","model":"m","digest":"<sha256>","created_at":1700000000,
//!  "checksum":"<sha256>","response":{...raw wire response...}}
//! ```
//!
//! `digest` covers the canonicalized request body and the attempt number;
//! `checksum` covers capability, model, digest and the serialized response.
//! Lines that fail to parse or whose checksum does not match are skipped with a
//! warning, so the request is recomputed and appended again.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::canonical_input;

use super::{Capability, Transport, WireRequest};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub capability: Capability,
    pub model: String,
    pub digest: String,
}

impl CacheKey {
    pub fn for_request(request: &WireRequest) -> Self {
        CacheKey {
            capability: request.capability,
            model: request.model.clone(),
            digest: request_digest(&request.body, request.attempt),
        }
    }
}

/// Digest of a request body with every string canonicalized.
pub fn request_digest(body: &Value, attempt: u32) -> String {
    let canonical = canonicalize_strings(body);
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(&canonical).expect("Value serializes"));
    hasher.update(format!("\nattempt={attempt}"));
    hex::encode(hasher.finalize())
}

fn canonicalize_strings(v: &Value) -> Value {
    match v {
        Value::String(s) => Value::String(canonical_input(s)),
        Value::Array(items) => Value::Array(items.iter().map(canonicalize_strings).collect()),
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, v)| (k.clone(), canonicalize_strings(v)))
                .collect(),
        ),
        other => other.clone(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    capability: Capability,
    model: String,
    digest: String,
    created_at: u64,
    checksum: String,
    response: Value,
}

fn checksum(key: &CacheKey, response: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(key.capability.tag());
    hasher.update("\n");
    hasher.update(&key.model);
    hasher.update("\n");
    hasher.update(&key.digest);
    hasher.update("\n");
    hasher.update(serde_json::to_string(response).expect("Value serializes"));
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: u64,
    pub hits: u64,
    pub misses: u64,
    pub corrupt: u64,
}

pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<CacheKey, Value>>,
    writer: Mutex<Option<File>>,
    /// Keys currently being computed; concurrent requests for them wait.
    pending: Mutex<HashSet<CacheKey>>,
    settled: Condvar,
    hits: AtomicU64,
    misses: AtomicU64,
    corrupt: AtomicU64,
}

impl ResponseCache {
    /// Cache that lives only for the current process.
    pub fn in_memory() -> Self {
        ResponseCache {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
            pending: Mutex::new(HashSet::new()),
            settled: Condvar::new(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            corrupt: AtomicU64::new(0),
        }
    }

    /// Loads existing entries from `path` (if present) and opens it for appending.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut entries = HashMap::new();
        let mut corrupt = 0;
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match parse_line(&line) {
                    Some((key, response)) => {
                        entries.entry(key).or_insert(response);
                    }
                    None => {
                        corrupt += 1;
                        log::warn!("{}:{}: ignoring corrupt cache entry", path.display(), i + 1);
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(ResponseCache {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
            pending: Mutex::new(HashSet::new()),
            settled: Condvar::new(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            corrupt: AtomicU64::new(corrupt),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &CacheKey) -> Option<Value> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    pub fn insert(&self, key: CacheKey, response: Value) -> Result<()> {
        {
            let mut writer = self.writer.lock().expect("cache writer lock");
            if let Some(file) = writer.as_mut() {
                let line = CacheLine {
                    capability: key.capability,
                    model: key.model.clone(),
                    digest: key.digest.clone(),
                    created_at: SystemTime::now()
                        .duration_since(UNIX_EPOCH)
                        .map(|d| d.as_secs())
                        .unwrap_or(0),
                    checksum: checksum(&key, &response),
                    response: response.clone(),
                };
                let mut text = serde_json::to_string(&line)?;
                text.push('\n');
                let path = self.path.clone().unwrap_or_default();
                file.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
                file.flush().map_err(|e| Error::io(&path, e))?;
            }
        }
        self.entries
            .write()
            .expect("cache lock")
            .entry(key)
            .or_insert(response);
        Ok(())
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            entries: self.entries.read().expect("cache lock").len() as u64,
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            corrupt: self.corrupt.load(Ordering::Relaxed),
        }
    }

    /// Returns the stored response for `request`, or calls `compute` and stores its result.
    ///
    /// Concurrent misses on one key are computed once; the other callers wait
    /// for the first and then read its stored response.
    pub fn cached(&self, request: &WireRequest, compute: impl FnOnce() -> Result<Value>) -> Result<Value> {
        let key = CacheKey::for_request(request);
        {
            let mut pending = self.pending.lock().expect("cache pending lock");
            loop {
                if let Some(hit) = self.get(&key) {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(hit);
                }
                if !pending.contains(&key) {
                    pending.insert(key.clone());
                    break;
                }
                pending = self.settled.wait(pending).expect("cache pending lock");
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let outcome = compute().and_then(|response| {
            self.insert(key.clone(), response.clone())?;
            Ok(response)
        });
        self.pending.lock().expect("cache pending lock").remove(&key);
        self.settled.notify_all();
        outcome
    }
}

fn parse_line(line: &str) -> Option<(CacheKey, Value)> {
    let parsed: CacheLine = serde_json::from_str(line).ok()?;
    let key = CacheKey {
        capability: parsed.capability,
        model: parsed.model,
        digest: parsed.digest,
    };
    (checksum(&key, &parsed.response) == parsed.checksum).then_some((key, parsed.response))
}

/// Serves requests from a [`ResponseCache`] before falling through to `inner`.
pub struct CachedTransport<T> {
    inner: T,
    cache: Arc<ResponseCache>,
}

impl<T: Transport> CachedTransport<T> {
    pub fn new(inner: T, cache: Arc<ResponseCache>) -> Self {
        CachedTransport { inner, cache }
    }

    pub fn cache(&self) -> &Arc<ResponseCache> {
        &self.cache
    }
}

impl<T: Transport> Transport for CachedTransport<T> {
    fn call(&self, request: &WireRequest) -> Result<Value> {
        self.cache.cached(request, || self.inner.call(request))
    }
}
