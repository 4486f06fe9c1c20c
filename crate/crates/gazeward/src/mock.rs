//! Loopback embedding server for tests and offline runs. Every request is
//! appended to a log with the status it was answered with.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tiny_http::{Header, Response, Server};

use crate::remote::{CueKind, EmbedRequest, EmbedResponse};

#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    /// The same vector for every request.
    Fixed(Vec<f32>),
    /// Deterministic pseudo-random values in [-1, 1] keyed by kind and id.
    Seeded { visual_len: usize, text_len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockBehavior {
    pub reply: MockReply,
    /// The first `fail_first` requests are answered with `fail_status`.
    pub fail_first: usize,
    pub fail_status: u16,
    /// Sleep before answering each request.
    pub delay: Duration,
}

impl MockBehavior {
    pub fn new(reply: MockReply) -> Self {
        Self {
            reply,
            fail_first: 0,
            fail_status: 500,
            delay: Duration::ZERO,
        }
    }

    pub fn failing_first(mut self, n: usize) -> Self {
        self.fail_first = n;
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedRequest {
    pub kind: Option<CueKind>,
    pub id: Option<String>,
    pub status: u16,
    /// Arrival time since the server started.
    pub at: Duration,
}

pub struct MockEmbedServer {
    server: Arc<Server>,
    addr: SocketAddr,
    log: Arc<Mutex<Vec<LoggedRequest>>>,
    worker: Option<JoinHandle<()>>,
}

fn seeded(kind: CueKind, id: &str, len: usize) -> Vec<f32> {
    (0..len)
        .map(|k| {
            let mut h = DefaultHasher::new();
            (kind, id, k).hash(&mut h);
            (h.finish() >> 11) as f32 / (1u64 << 53) as f32 * 2.0 - 1.0
        })
        .collect()
}

impl MockEmbedServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves on a
    /// background thread until dropped.
    pub fn start(addr: &str, behavior: MockBehavior) -> std::io::Result<Self> {
        let server = Arc::new(Server::http(addr).map_err(std::io::Error::other)?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("mock server is not bound to an IP address"))?;
        let log = Arc::new(Mutex::new(Vec::new()));
        let started = Instant::now();
        let seen = AtomicUsize::new(0);
        let worker = {
            let server = Arc::clone(&server);
            let log = Arc::clone(&log);
            std::thread::spawn(move || {
                for mut request in server.incoming_requests() {
                    let at = started.elapsed();
                    let mut body = String::new();
                    let parsed: Option<EmbedRequest> = request
                        .as_reader()
                        .read_to_string(&mut body)
                        .ok()
                        .and_then(|_| serde_json::from_str(&body).ok());
                    let n = seen.fetch_add(1, Ordering::SeqCst);
                    std::thread::sleep(behavior.delay);
                    let (status, text) = match &parsed {
                        _ if request.url() != "/embed" => (404, String::from("{}")),
                        None => (400, String::from("{\"error\":\"bad request\"}")),
                        Some(_) if n < behavior.fail_first => {
                            (behavior.fail_status, String::from("{\"error\":\"injected\"}"))
                        }
                        Some(req) => {
                            let embedding = match &behavior.reply {
                                MockReply::Fixed(v) => v.clone(),
                                MockReply::Seeded { visual_len, text_len } => {
                                    let len = match req.kind {
                                        CueKind::Visual => *visual_len,
                                        CueKind::Text => *text_len,
                                    };
                                    seeded(req.kind, &req.id, len)
                                }
                            };
                            let resp = EmbedResponse {
                                id: req.id.clone(),
                                embedding,
                            };
                            (200, serde_json::to_string(&resp).expect("response serializes"))
                        }
                    };
                    log.lock().unwrap().push(LoggedRequest {
                        kind: parsed.as_ref().map(|r| r.kind),
                        id: parsed.map(|r| r.id),
                        status,
                        at,
                    });
                    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
                    let _ = request.respond(Response::from_string(text).with_status_code(status).with_header(header));
                }
            })
        };
        Ok(Self {
            server,
            addr,
            log,
            worker: Some(worker),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> Vec<LoggedRequest> {
        self.log.lock().unwrap().clone()
    }

    /// Blocks the calling thread while the server runs.
    pub fn join(mut self) {
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for MockEmbedServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
