//! HTTP front end: a frozen model served over two JSON endpoints.
//!
//! `GET /v1/health` reports the loaded model; `POST /v1/classify` scores one
//! text. Responses for identical requests are memoized in a bounded cache so
//! concurrent duplicates receive byte-identical bodies.

use std::collections::{HashMap, VecDeque};
use std::io::Read;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use astra_core::classify::{classify_with, ClassifyRequest, SegmentPolicy};
use astra_core::labels::PerLabel;
use astra_core::model::GuardModel;
use astra_core::{Error, Result};
use tiny_http::{Header, Method, Request, Response, Server};

/// How many distinct request bodies to keep memoized.
const CACHE_CAPACITY: usize = 4096;
/// How long a worker blocks on the accept queue before checking the stop flag.
const POLL_INTERVAL: Duration = Duration::from_millis(50);

#[derive(Clone, Debug)]
pub struct ServeOptions {
    /// Bind address; port 0 picks an ephemeral port.
    pub addr: String,
    pub workers: usize,
    /// Request bodies above this many bytes are refused with 413.
    pub max_body_bytes: usize,
    /// Optional sliding-window segmentation applied to every request.
    pub policy: Option<SegmentPolicy>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions { addr: "127.0.0.1:8460".to_string(), workers: 4, max_body_bytes: 1 << 20, policy: None }
    }
}

/// First-writer-wins response store; later duplicates return the stored body.
struct ResponseCache {
    map: HashMap<CacheKey, String>,
    order: VecDeque<CacheKey>,
    capacity: usize,
}

type CacheKey = (String, Option<u64>);

impl ResponseCache {
    fn new(capacity: usize) -> Self {
        ResponseCache { map: HashMap::new(), order: VecDeque::new(), capacity }
    }

    /// Store `body` unless the key is already present; either way, return the
    /// body every caller with this key must see.
    fn get_or_insert(&mut self, key: CacheKey, body: String) -> String {
        if let Some(existing) = self.map.get(&key) {
            return existing.clone();
        }
        if self.order.len() == self.capacity {
            if let Some(oldest) = self.order.pop_front() {
                self.map.remove(&oldest);
            }
        }
        self.order.push_back(key.clone());
        self.map.insert(key, body.clone());
        body
    }

    fn get(&self, key: &CacheKey) -> Option<String> {
        self.map.get(key).cloned()
    }
}

struct Shared {
    model: GuardModel<f32>,
    model_name: String,
    policy: Option<SegmentPolicy>,
    max_body_bytes: usize,
    cache: Mutex<ResponseCache>,
}

/// A bound server with its worker pool. Dropping it stops the workers.
pub struct RunningService {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
}

impl RunningService {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    /// Signal the workers and join them.
    pub fn stop(mut self) {
        self.shutdown();
    }

    /// Block until the workers exit (they run until the process dies).
    pub fn wait(mut self) {
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Bind the address and start a worker pool serving `model`.
pub fn spawn(model: GuardModel<f32>, model_name: impl Into<String>, opts: &ServeOptions) -> Result<RunningService> {
    if opts.max_body_bytes == 0 {
        return Err(Error::config("max_body_bytes must be at least 1"));
    }
    // Surface bad policies and unfitted heads now rather than per request.
    classify_with(&model, "", opts.policy.as_ref(), None)?;

    let server =
        Server::http(&opts.addr).map_err(|e| Error::state(format!("cannot bind {}: {e}", opts.addr)))?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::state(format!("{} is not an ip address", opts.addr)))?;
    let server = Arc::new(server);
    let shared = Arc::new(Shared {
        model,
        model_name: model_name.into(),
        policy: opts.policy,
        max_body_bytes: opts.max_body_bytes,
        cache: Mutex::new(ResponseCache::new(CACHE_CAPACITY)),
    });
    let stop = Arc::new(AtomicBool::new(false));
    let handles = (0..opts.workers.max(1))
        .map(|_| {
            let server = Arc::clone(&server);
            let shared = Arc::clone(&shared);
            let stop = Arc::clone(&stop);
            std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    match server.recv_timeout(POLL_INTERVAL) {
                        Ok(Some(req)) => handle(&shared, req),
                        Ok(None) => {}
                        Err(_) => break,
                    }
                }
            })
        })
        .collect();
    Ok(RunningService { addr, stop, handles })
}

fn handle(shared: &Shared, mut req: Request) {
    let path = req.url().split('?').next().unwrap_or("").to_string();
    let (status, body) = match (req.method(), path.as_str()) {
        (Method::Get, "/v1/health") => health(shared),
        (Method::Post, "/v1/classify") => classify_endpoint(shared, &mut req),
        (_, "/v1/health") | (_, "/v1/classify") => {
            (405, error_body(&format!("method {} not allowed on {path}", req.method())))
        }
        _ => (404, error_body(&format!("no such endpoint: {path}"))),
    };
    let response = Response::from_string(body).with_status_code(status).with_header(json_header());
    let _ = req.respond(response);
}

fn json_header() -> Header {
    Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header")
}

fn error_body(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

fn health(shared: &Shared) -> (u16, String) {
    let body = serde_json::json!({
        "status": "ok",
        "model": shared.model_name,
        "arch": shared.model.arch.name(),
    });
    (200, body.to_string())
}

fn classify_endpoint(shared: &Shared, req: &mut Request) -> (u16, String) {
    let too_large = (413, error_body(&format!("body exceeds {} bytes", shared.max_body_bytes)));
    if req.body_length().is_some_and(|n| n > shared.max_body_bytes) {
        return too_large;
    }
    let mut raw = Vec::new();
    let limit = shared.max_body_bytes as u64 + 1;
    if let Err(e) = req.as_reader().take(limit).read_to_end(&mut raw) {
        return (400, error_body(&format!("cannot read body: {e}")));
    }
    if raw.len() > shared.max_body_bytes {
        return too_large;
    }
    let parsed: ClassifyRequest = match serde_json::from_slice(&raw) {
        Ok(p) => p,
        Err(e) => return (400, error_body(&format!("invalid request: {e}"))),
    };
    if let Some(t) = parsed.threshold_override {
        if !(t > 0.0 && t < 1.0) {
            return (400, error_body(&format!("threshold_override must be in (0,1), got {t}")));
        }
    }

    let key: CacheKey = (parsed.text.clone(), parsed.threshold_override.map(f64::to_bits));
    if let Some(body) = shared.cache.lock().expect("cache lock").get(&key) {
        return (200, body);
    }

    let thresholds = parsed.threshold_override.map(|t| PerLabel::new(t, t));
    let response = match classify_with(&shared.model, &parsed.text, shared.policy.as_ref(), thresholds.as_ref()) {
        Ok(r) => r,
        Err(e @ (Error::Config(_) | Error::Usage(_) | Error::Data(_))) => return (400, error_body(&e.to_string())),
        Err(e) => return (500, error_body(&e.to_string())),
    };
    let body = match serde_json::to_string(&response) {
        Ok(b) => b,
        Err(e) => return (500, error_body(&e.to_string())),
    };
    (200, shared.cache.lock().expect("cache lock").get_or_insert(key, body))
}
