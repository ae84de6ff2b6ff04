//! Blocking JSON-over-HTTP transport with budgeted retries.

use std::time::Duration;

use rand::RngExt;
use serde_json::Value;
use ureq::Agent;

use crate::error::{Error, Result};

use super::{protocol, Endpoints, Transport, WireRequest};

const BACKOFF_BASE: Duration = Duration::from_millis(100);
const BACKOFF_CAP: Duration = Duration::from_secs(5);

pub struct HttpTransport {
    agent: Agent,
    endpoints: Endpoints,
    retries: u32,
    backoff_base: Duration,
}

impl HttpTransport {
    pub fn new(endpoints: Endpoints, timeout: Duration, retries: u32) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            agent,
            endpoints,
            retries,
            backoff_base: BACKOFF_BASE,
        }
    }

    /// Overrides the first backoff delay; later delays double from it.
    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn url(&self, request: &WireRequest) -> Result<String> {
        let base = self.endpoints.get(request.capability).ok_or_else(|| {
            Error::Config(format!("no endpoint configured for `{}`", request.capability))
        })?;
        Ok(format!("{}{}", base.trim_end_matches('/'), request.capability.path()))
    }

    fn send_once(&self, url: &str, body: &Value) -> Result<Value> {
        let mut response = self.agent.post(url).send_json(body).map_err(|e| Error::Transport {
            endpoint: url.to_string(),
            message: e.to_string(),
        })?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport {
                endpoint: url.to_string(),
                message: e.to_string(),
            })?;
        if !(200..300).contains(&status) {
            let message = serde_json::from_str::<Value>(&text)
                .ok()
                .filter(|v| protocol::validate_error(v).is_ok())
                .and_then(|v| v["error"].as_str().map(str::to_string))
                .unwrap_or(text);
            return Err(Error::Backend { status, message });
        }
        serde_json::from_str(&text).map_err(|e| Error::MalformedResponse(format!("{url}: {e}")))
    }

    fn delay(&self, attempt: u32) -> Duration {
        let exp = self.backoff_base.saturating_mul(1 << attempt.min(16)).min(BACKOFF_CAP);
        let jitter = rand::rng().random_range(0.0..1.0);
        exp.mul_f64(0.5 + 0.5 * jitter)
    }
}

impl Transport for HttpTransport {
    fn call(&self, request: &WireRequest) -> Result<Value> {
        let url = self.url(request)?;
        let mut attempt = 0;
        loop {
            match self.send_once(&url, &request.body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    log::debug!("retrying {url} after error: {e}");
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
