//! Minimal HTTP server exposing a [`Service`] on the wire protocol.
//!
//! Used for protocol-conformance tests and for running the pipeline against
//! mocks over real sockets.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::Value;
use tiny_http::{Header, Method, Response, Server};

use crate::error::{Error, Result};

use super::mock::{Service, ServiceError};
use super::{protocol, Capability};

pub struct StubServer {
    server: Arc<Server>,
    addr: SocketAddr,
    requests: Arc<AtomicUsize>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds an ephemeral port on localhost and serves `service` on a background thread.
    pub fn start(service: Arc<dyn Service>) -> Result<Self> {
        Self::bind("127.0.0.1:0", service)
    }

    pub fn bind(addr: &str, service: Arc<dyn Service>) -> Result<Self> {
        let server = Server::http(addr).map_err(|e| Error::Transport {
            endpoint: addr.to_string(),
            message: e.to_string(),
        })?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Config("stub server bound to a non-IP address".into()))?;
        let server = Arc::new(server);
        let requests = Arc::new(AtomicUsize::new(0));
        let handle = {
            let server = server.clone();
            let requests = requests.clone();
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    requests.fetch_add(1, Ordering::SeqCst);
                    let service = service.clone();
                    std::thread::spawn(move || respond(request, service.as_ref()));
                }
            })
        };
        Ok(StubServer {
            server,
            addr,
            requests,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn respond(mut request: tiny_http::Request, service: &dyn Service) {
    let capability = Capability::ALL
        .into_iter()
        .find(|c| c.path() == request.url());
    let outcome = match (request.method(), capability) {
        (Method::Post, Some(capability)) => {
            let mut text = String::new();
            match request.as_reader().read_to_string(&mut text) {
                Err(e) => Err(ServiceError::bad_request(e.to_string())),
                Ok(_) => serde_json::from_str::<Value>(&text)
                    .map_err(|e| ServiceError::bad_request(format!("invalid JSON: {e}")))
                    .and_then(|body| {
                        protocol::validate_request(capability, &body)
                            .map_err(ServiceError::bad_request)?;
                        service.handle(capability, &body)
                    }),
            }
        }
        (_, Some(_)) => Err(ServiceError {
            status: 405,
            message: "method not allowed".into(),
        }),
        (_, None) => Err(ServiceError {
            status: 404,
            message: format!("no route for {}", request.url()),
        }),
    };
    let (status, body) = match outcome {
        Ok(v) => (200, v),
        Err(e) => (e.status, protocol::error_body(&e.message)),
    };
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let response = Response::from_string(body.to_string())
        .with_status_code(status)
        .with_header(header);
    let _ = request.respond(response);
}
