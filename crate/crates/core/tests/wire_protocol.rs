//! Wire-protocol conformance over real sockets against the in-repo stub server.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use semsense::backend::{
    Capability, Classifier, EmbedClient, Embedder, Endpoints, GenerationParams, Generator, GeneratorClient,
    HttpTransport, MockBackend, MockNli, MockTransport, NliClient, Service, ServiceError, StubServer, Throttled,
    Transport, WireRequest,
};
use semsense::Error;
use serde_json::{json, Value};

type Log = Arc<Mutex<Vec<(Capability, Value)>>>;

fn recording(log: Log, respond: impl Fn(Capability) -> Result<Value, ServiceError> + Send + Sync + 'static) -> Arc<dyn Service> {
    Arc::new(move |cap: Capability, body: &Value| {
        log.lock().unwrap().push((cap, body.clone()));
        respond(cap)
    })
}

fn endpoints(url: &str) -> Endpoints {
    Endpoints {
        nli: Some(url.to_string()),
        generate: Some(url.to_string()),
        embed: Some(url.to_string()),
    }
}

fn transport(url: &str, retries: u32) -> Arc<dyn Transport> {
    Arc::new(HttpTransport::new(endpoints(url), Duration::from_secs(5), retries).with_backoff_base(Duration::from_millis(1)))
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

fn set(names: &[&str]) -> BTreeSet<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn canned(cap: Capability) -> Result<Value, ServiceError> {
    Ok(match cap {
        Capability::Nli => json!({"probs": {"entailment": 0.7, "neutral": 0.2, "contradiction": 0.1}}),
        Capability::Generate => json!({"candidates": ["A dog is running.", "  ", "A dog runs fast."]}),
        Capability::Embed => json!({"vector": [0.5, -1.0, 2.0]}),
    })
}

#[test]
fn request_schemas_are_exact() {
    let log: Log = Arc::default();
    let server = StubServer::start(recording(log.clone(), canned)).unwrap();
    let t = transport(&server.url(), 0);

    let d = NliClient::new(t.clone(), "nli-m").classify("A  man sleeps.", "A man rests.").unwrap();
    assert_eq!(d.probs(), [0.7, 0.2, 0.1]);

    let params = GenerationParams::default();
    let c = GeneratorClient::new(t.clone(), "gen-m").generate_candidates("A dog runs.", &params, 0).unwrap();
    assert_eq!(c, vec!["A dog is running.", "A dog runs fast."]);

    let v = EmbedClient::new(t, "emb-m").embed("A dog runs.").unwrap();
    assert_eq!(v, vec![0.5, -1.0, 2.0]);

    let log = log.lock().unwrap();
    assert_eq!(log.len(), 3);
    let (cap, nli) = &log[0];
    assert_eq!(*cap, Capability::Nli);
    assert_eq!(keys(nli), set(&["premise", "hypothesis", "model"]));
    assert_eq!(nli["premise"], "A man sleeps.");
    assert_eq!(nli["model"], "nli-m");

    let (cap, generate) = &log[1];
    assert_eq!(*cap, Capability::Generate);
    assert_eq!(
        keys(generate),
        set(&["prompt", "n", "temperature", "max_tokens", "diversity_penalty", "beam_groups", "model"])
    );
    assert_eq!(
        generate["prompt"],
        "Rephrase the following sentence while preserving its original meaning: A dog runs.."
    );
    assert_eq!(generate["n"], 8);
    assert_eq!(generate["max_tokens"], 40);
    assert!(generate["temperature"].is_f64());

    let (cap, embed) = &log[2];
    assert_eq!(*cap, Capability::Embed);
    assert_eq!(keys(embed), set(&["text", "model"]));
}

#[test]
fn probabilities_not_summing_to_one_are_rejected() {
    let service: Arc<dyn Service> = Arc::new(|_: Capability, _: &Value| {
        Ok(json!({"probs": {"entailment": 0.3, "neutral": 0.2, "contradiction": 0.1}}))
    });
    let server = StubServer::start(service).unwrap();
    let err = NliClient::new(transport(&server.url(), 0), "m").classify("p", "h").unwrap_err();
    assert!(
        matches!(err.root(), Error::MalformedResponse(_) | Error::InvalidDistribution(_)),
        "{err}"
    );
}

#[test]
fn missing_and_extra_response_fields_are_rejected() {
    for body in [
        json!({"probs": {"entailment": 1.0, "neutral": 0.0}}),
        json!({"probs": {"entailment": 1.0, "neutral": 0.0, "contradiction": 0.0, "other": 0.0}}),
        json!({"labels": [1.0, 0.0, 0.0]}),
    ] {
        let service: Arc<dyn Service> = Arc::new(move |_: Capability, _: &Value| Ok(body.clone()));
        let server = StubServer::start(service).unwrap();
        assert!(NliClient::new(transport(&server.url(), 0), "m").classify("p", "h").is_err());
    }
}

#[test]
fn error_bodies_surface_status_and_message() {
    let service: Arc<dyn Service> = Arc::new(|_: Capability, _: &Value| {
        Err(ServiceError { status: 422, message: "model not loaded".into() })
    });
    let server = StubServer::start(service).unwrap();
    let err = NliClient::new(transport(&server.url(), 3), "m").classify("p", "h").unwrap_err();
    match err.root() {
        Error::Backend { status, message } => {
            assert_eq!(*status, 422);
            assert_eq!(message, "model not loaded");
        }
        other => panic!("unexpected {other:?}"),
    }
    // client errors are not retried
    assert_eq!(server.requests(), 1);
}

#[test]
fn server_errors_are_retried() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let service: Arc<dyn Service> = Arc::new(move |cap: Capability, _: &Value| {
        if c.fetch_add(1, Ordering::SeqCst) < 2 {
            Err(ServiceError { status: 503, message: "warming up".into() })
        } else {
            canned(cap)
        }
    });
    let server = StubServer::start(service).unwrap();
    let d = NliClient::new(transport(&server.url(), 3), "m").classify("p", "h").unwrap();
    assert_eq!(d.probs(), [0.7, 0.2, 0.1]);
    assert_eq!(calls.load(Ordering::SeqCst), 3);

    calls.store(0, Ordering::SeqCst);
    let err = NliClient::new(transport(&server.url(), 1), "m").classify("p", "h").unwrap_err();
    assert!(matches!(err.root(), Error::Backend { status: 503, .. }));
    assert_eq!(calls.load(Ordering::SeqCst), 2);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let err = NliClient::new(transport(&url, 1), "m").classify("p", "h").unwrap_err();
    assert!(matches!(err.root(), Error::Transport { .. }), "{err}");
}

#[test]
fn stub_rejects_nonconforming_requests() {
    let server = StubServer::start(Arc::new(MockBackend { nli: Some(MockNli::new()), ..Default::default() })).unwrap();
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let post = |path: &str, body: Value| {
        let mut r = agent.post(&format!("{}{path}", server.url())).send_json(body).unwrap();
        let status = r.status().as_u16();
        (status, r.body_mut().read_json::<Value>().unwrap())
    };
    let (status, body) = post("/v1/nli", json!({"premise": "p", "hypothesis": "h", "model": "m", "extra": 1}));
    assert_eq!(status, 400);
    assert!(body["error"].is_string());
    let (status, _) = post("/v1/nli", json!({"premise": "p", "hypothesis": "h"}));
    assert_eq!(status, 400);
    let (status, body) = post("/v1/nli", json!({"premise": "p", "hypothesis": "h", "model": "m"}));
    assert_eq!(status, 200);
    assert_eq!(keys(&body), set(&["probs"]));
    assert_eq!(keys(&body["probs"]), set(&["entailment", "neutral", "contradiction"]));
    let (status, _) = post("/v1/unknown", json!({}));
    assert_eq!(status, 404);
    let mut r = agent.get(&format!("{}/v1/nli", server.url())).call().unwrap();
    assert_eq!(r.status().as_u16(), 405);
    assert!(r.body_mut().read_json::<Value>().unwrap()["error"].is_string());
}

#[test]
fn in_flight_requests_respect_the_limit() {
    let mock = Arc::new(
        MockTransport::new(Arc::new(MockBackend { nli: Some(MockNli::new()), ..Default::default() }))
            .with_delay(Duration::from_millis(15)),
    );
    let throttled = Arc::new(Throttled::new(mock.clone(), 3));
    let handles: Vec<_> = (0..16)
        .map(|i| {
            let t = throttled.clone();
            std::thread::spawn(move || {
                let request = WireRequest {
                    capability: Capability::Nli,
                    model: "m".into(),
                    body: json!({"premise": format!("p{i}"), "hypothesis": "h", "model": "m"}),
                    attempt: 0,
                };
                t.call(&request).unwrap();
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(mock.calls(), 16);
    assert!(mock.peak_concurrency() <= 3, "peak {}", mock.peak_concurrency());
    assert_eq!(throttled.peak(), mock.peak_concurrency());
}
