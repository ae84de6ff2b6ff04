//! HTTP API consumed by the annotation front end.
//!
//! | method | path | body / query | response |
//! |---|---|---|---|
//! | GET | `/api/tasks` | `?annotator=ID` | `{"tasks":[{task_id,h,h_prime,judged}]}` |
//! | POST | `/api/judgments` | `{task_id,annotator,equivalent[,comment]}` | `{"ok":true}` |
//! | GET | `/api/agreement` | | `{percent_agreement,kappa,n}`, 409 while incomplete |
//! | GET | `/api/export` | | CSV of all live judgments |
//!
//! Errors are `{"error": "..."}` with a 4xx status. Any other GET is served
//! from the optional static directory.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::Deserialize;
use serde_json::{json, Value};
use tiny_http::{Header, Method, Response, Server};

use super::{agreement_report, export_csv, AnnotationTask, Judgment, JudgmentStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl Reply {
    fn json(status: u16, value: Value) -> Self {
        Reply {
            status,
            content_type: "application/json",
            body: value.to_string().into_bytes(),
        }
    }

    fn error(status: u16, message: impl Into<String>) -> Self {
        Self::json(status, json!({ "error": message.into() }))
    }

    pub fn json_body(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Submission {
    task_id: String,
    annotator: String,
    equivalent: bool,
    #[serde(default)]
    comment: Option<String>,
}

pub struct AnnotationService {
    tasks: Vec<AnnotationTask>,
    task_ids: HashSet<String>,
    store: JudgmentStore,
    /// The two annotators whose agreement is reported.
    pair: (String, String),
    static_dir: Option<PathBuf>,
}

impl AnnotationService {
    pub fn new(tasks: Vec<AnnotationTask>, store: JudgmentStore, annotators: &[String]) -> Result<Self> {
        let [a, b] = annotators else {
            return Err(Error::Config(format!(
                "exactly two annotators are required, got {}",
                annotators.len()
            )));
        };
        let task_ids: HashSet<String> = tasks.iter().map(|t| t.task_id.clone()).collect();
        if task_ids.len() != tasks.len() {
            return Err(Error::Precondition("duplicate annotation task ids".into()));
        }
        Ok(AnnotationService {
            tasks,
            task_ids,
            store,
            pair: (a.clone(), b.clone()),
            static_dir: None,
        })
    }

    pub fn with_static_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.static_dir = Some(dir.into());
        self
    }

    pub fn store(&self) -> &JudgmentStore {
        &self.store
    }

    pub fn tasks(&self) -> &[AnnotationTask] {
        &self.tasks
    }

    fn is_annotator(&self, id: &str) -> bool {
        id == self.pair.0 || id == self.pair.1
    }

    /// Routes one request. `target` is the path plus optional query string.
    pub fn handle(&self, method: &Method, target: &str, body: &[u8]) -> Reply {
        let (path, query) = target.split_once('?').unwrap_or((target, ""));
        match (method, path) {
            (Method::Get, "/api/tasks") => self.list_tasks(query),
            (Method::Post, "/api/judgments") => self.submit(body),
            (Method::Get, "/api/agreement") => self.agreement(),
            (Method::Get, "/api/export") => self.export(),
            (_, p) if p.starts_with("/api/") => match p {
                "/api/tasks" | "/api/judgments" | "/api/agreement" | "/api/export" => {
                    Reply::error(405, "method not allowed")
                }
                _ => Reply::error(404, format!("no route for {p}")),
            },
            (Method::Get, p) => self.static_file(p),
            _ => Reply::error(405, "method not allowed"),
        }
    }

    fn list_tasks(&self, query: &str) -> Reply {
        let annotator = form_urlencoded::parse(query.as_bytes())
            .find(|(k, _)| k == "annotator")
            .map(|(_, v)| v.into_owned());
        let Some(annotator) = annotator.filter(|a| !a.is_empty()) else {
            return Reply::error(400, "missing annotator parameter");
        };
        if !self.is_annotator(&annotator) {
            return Reply::error(404, format!("unknown annotator {annotator}"));
        }
        let judged = self.store.judged_by(&annotator);
        let tasks: Vec<Value> = self
            .tasks
            .iter()
            .map(|t| {
                json!({
                    "task_id": t.task_id,
                    "h": t.h,
                    "h_prime": t.h_prime,
                    "judged": judged.contains(&t.task_id),
                })
            })
            .collect();
        Reply::json(200, json!({ "tasks": tasks }))
    }

    fn submit(&self, body: &[u8]) -> Reply {
        let sub: Submission = match serde_json::from_slice(body) {
            Ok(s) => s,
            Err(e) => return Reply::error(400, format!("invalid judgment: {e}")),
        };
        if !self.task_ids.contains(&sub.task_id) {
            return Reply::error(404, format!("unknown task {}", sub.task_id));
        }
        if !self.is_annotator(&sub.annotator) {
            return Reply::error(404, format!("unknown annotator {}", sub.annotator));
        }
        let mut judgment = Judgment::now(sub.task_id, sub.annotator, sub.equivalent);
        judgment.comment = sub.comment;
        match self.store.submit(judgment) {
            Ok(()) => Reply::json(200, json!({ "ok": true })),
            Err(e) => Reply::error(500, e.to_string()),
        }
    }

    fn agreement(&self) -> Reply {
        let paired = self.store.paired(&self.tasks, &self.pair.0, &self.pair.1);
        match paired.and_then(|(a, b)| agreement_report(&a, &b)) {
            Ok(r) => Reply::json(
                200,
                json!({ "percent_agreement": r.percent_agreement, "kappa": r.kappa, "n": r.n }),
            ),
            Err(e @ Error::IncompleteOverlap(_)) => Reply::error(409, e.to_string()),
            Err(e) => Reply::error(500, e.to_string()),
        }
    }

    fn export(&self) -> Reply {
        match export_csv(&self.tasks, &self.store.snapshot()) {
            Ok(text) => Reply {
                status: 200,
                content_type: "text/csv",
                body: text.into_bytes(),
            },
            Err(e) => Reply::error(500, e.to_string()),
        }
    }

    fn static_file(&self, path: &str) -> Reply {
        let Some(root) = &self.static_dir else {
            return Reply::error(404, format!("no route for {path}"));
        };
        let rel = Path::new(path.trim_start_matches('/'));
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) && !rel.as_os_str().is_empty() {
            return Reply::error(404, "invalid path");
        }
        let mut file = root.join(rel);
        if file.is_dir() {
            file.push("index.html");
        }
        match std::fs::read(&file) {
            Ok(body) => Reply {
                status: 200,
                content_type: content_type(&file),
                body,
            },
            Err(_) => Reply::error(404, format!("not found: {path}")),
        }
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

pub struct AnnotationServer {
    server: Arc<Server>,
    addr: SocketAddr,
    handle: Option<JoinHandle<()>>,
}

impl AnnotationServer {
    pub fn bind(addr: &str, service: Arc<AnnotationService>) -> Result<Self> {
        let server = Server::http(addr).map_err(|e| Error::Transport {
            endpoint: addr.to_string(),
            message: e.to_string(),
        })?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Config("annotation server bound to a non-IP address".into()))?;
        let server = Arc::new(server);
        let handle = {
            let server = server.clone();
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    let service = service.clone();
                    std::thread::spawn(move || respond(request, &service));
                }
            })
        };
        Ok(AnnotationServer {
            server,
            addr,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server thread exits.
    pub fn wait(mut self) {
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for AnnotationServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn respond(mut request: tiny_http::Request, service: &AnnotationService) {
    let mut body = Vec::new();
    let reply = match request.as_reader().read_to_end(&mut body) {
        Ok(_) => service.handle(request.method(), request.url(), &body),
        Err(e) => Reply::error(400, e.to_string()),
    };
    let header = Header::from_bytes("Content-Type", reply.content_type).expect("static header");
    let response = Response::from_data(reply.body)
        .with_status_code(reply.status)
        .with_header(header);
    let _ = request.respond(response);
}
