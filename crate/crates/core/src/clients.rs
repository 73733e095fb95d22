//! Clients for the three external inference services.
//!
//! Wire contract (JSON over HTTP POST):
//!
//! | route            | request                                 | response              |
//! |------------------|-----------------------------------------|-----------------------|
//! | `{base}/v1/chat`   | `{model, messages[], temperature, top_p}` | `{content}`           |
//! | `{base}/v1/embed`  | `{model, texts[]}`                        | `{vectors[][]}`       |
//! | `{base}/v1/rerank` | `{model, query, passages[]}`              | `{scores[]}` in [0,1] |
//!
//! Every pipeline stage talks to the services through the [`ChatClient`],
//! [`EmbeddingClient`] and [`RerankClient`] traits, so tests and offline runs
//! can substitute the deterministic implementations in [`crate::mock`].

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::parallel::ordered_map;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("{endpoint}: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("{endpoint}: HTTP {status} after {attempts} attempt(s): {body}")]
    Status {
        endpoint: String,
        status: u16,
        body: String,
        attempts: u32,
    },
    #[error("{endpoint}: protocol violation: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid endpoint configuration: {0}")]
    Config(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl ClientError {
    /// Number of attempts made before giving up, when the error came from
    /// the network.
    pub fn attempts(&self) -> Option<u32> {
        match self {
            ClientError::Transport { attempts, .. } | ClientError::Status { attempts, .. } => {
                Some(*attempts)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// Dense vector returned by the embedding service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, String> {
        if values.is_empty() {
            return Err("empty embedding".into());
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(format!("non-finite embedding entry at index {i}"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

pub trait ChatClient: Send + Sync {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, ClientError>;
}

/// Closures are chat clients, which keeps scripted replies in tests short.
impl<F> ChatClient for F
where
    F: Fn(&[ChatMessage]) -> Result<String, ClientError> + Send + Sync,
{
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        self(messages)
    }
}

pub trait EmbeddingClient: Send + Sync {
    /// One vector per input text, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError>;
}

pub trait RerankClient: Send + Sync {
    fn id(&self) -> &str;
    /// One score in [0,1] per passage, in input order.
    fn rerank(&self, query: &str, passages: &[String]) -> Result<Vec<f64>, ClientError>;
}

fn default_timeout() -> f64 {
    60.0
}
fn default_max_batch() -> usize {
    32
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff() -> Vec<u64> {
    vec![500, 1000, 2000, 4000]
}
fn default_in_flight() -> usize {
    4
}
fn default_sampling() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

/// Connection and batching settings for one service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceEndpoint {
    pub id: String,
    pub base_url: String,
    #[serde(default)]
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Delay before retry `n` is `backoff_ms[min(n, len - 1)]`.
    #[serde(default = "default_backoff")]
    pub backoff_ms: Vec<u64>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_sampling")]
    pub temperature: f64,
    #[serde(default = "default_sampling")]
    pub top_p: f64,
    #[serde(default = "default_true")]
    pub cache: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl ServiceEndpoint {
    pub fn new(id: impl Into<String>, base_url: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            base_url: base_url.into(),
            model: String::new(),
            api_key: None,
            timeout_secs: default_timeout(),
            max_batch: default_max_batch(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff(),
            max_in_flight: default_in_flight(),
            temperature: default_sampling(),
            top_p: default_sampling(),
            cache: true,
            cache_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.max_batch == 0 {
            return Err(ClientError::Config(format!("{}: max_batch must be >= 1", self.id)));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(ClientError::Config(format!("{}: timeout must be > 0", self.id)));
        }
        if self.max_in_flight == 0 {
            return Err(ClientError::Config(format!("{}: max_in_flight must be >= 1", self.id)));
        }
        Ok(())
    }

    /// Name of the environment variable that overrides this endpoint's key.
    pub fn api_key_var(&self) -> String {
        let id: String = self
            .id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
            .collect();
        format!("POSFORGE_API_KEY_{id}")
    }

    pub fn apply_env_overrides(&mut self) {
        if let Ok(key) = std::env::var(self.api_key_var()) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
    }

    fn backoff(&self, retry: usize) -> Duration {
        let ms = match self.backoff_ms.as_slice() {
            [] => 0,
            s => s[retry.min(s.len() - 1)],
        };
        Duration::from_millis(ms)
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes a JSON value with object keys sorted at every level.
pub fn canonical_json(value: &Value) -> String {
    fn write(value: &Value, out: &mut String) {
        match value {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push('{');
                for (i, k) in keys.into_iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&Value::String(k.clone()).to_string());
                    out.push(':');
                    write(&map[k], out);
                }
                out.push('}');
            }
            Value::Array(items) => {
                out.push('[');
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(v, out);
                }
                out.push(']');
            }
            other => out.push_str(&other.to_string()),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

/// Response cache keyed by SHA-256 of (endpoint id, operation, canonical
/// payload). Always memoizes in memory; also persists when a directory is set.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<String, Value>>,
}

impl ResponseCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            mem: Mutex::new(HashMap::new()),
        }
    }

    pub fn key(endpoint_id: &str, op: &str, payload: &Value) -> String {
        let mut material = String::new();
        material.push_str(endpoint_id);
        material.push('\0');
        material.push_str(op);
        material.push('\0');
        material.push_str(&canonical_json(payload));
        sha256_hex(material.as_bytes())
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&key[..2]).join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        if let Some(v) = self.mem.lock().expect("cache poisoned").get(key) {
            return Some(v.clone());
        }
        let path = self.path(key)?;
        let bytes = std::fs::read(path).ok()?;
        let value: Value = serde_json::from_slice(&bytes).ok()?;
        self.mem
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), value.clone());
        Some(value)
    }

    pub fn put(&self, key: &str, value: &Value) -> Result<(), ClientError> {
        self.mem
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), value.clone());
        if let Some(path) = self.path(key) {
            let parent = path.parent().expect("cache path has a parent");
            std::fs::create_dir_all(parent).map_err(|e| ClientError::Cache(e.to_string()))?;
            // Write-then-rename so concurrent readers never see a partial file.
            let tmp = path.with_extension(format!("tmp{}", std::process::id()));
            std::fs::write(&tmp, value.to_string()).map_err(|e| ClientError::Cache(e.to_string()))?;
            std::fs::rename(&tmp, &path).map_err(|e| ClientError::Cache(e.to_string()))?;
        }
        Ok(())
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// Shared HTTP machinery: bounded in-flight requests, retries, caching.
pub struct HttpTransport {
    endpoint: ServiceEndpoint,
    agent: ureq::Agent,
    in_flight: Semaphore,
    cache: Option<ResponseCache>,
    requests: AtomicUsize,
}

impl HttpTransport {
    pub fn new(endpoint: ServiceEndpoint) -> Result<Self, ClientError> {
        endpoint.validate()?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build();
        let cache = endpoint
            .cache
            .then(|| ResponseCache::new(endpoint.cache_dir.clone()));
        Ok(Self {
            in_flight: Semaphore::new(endpoint.max_in_flight),
            endpoint,
            agent,
            cache,
            requests: AtomicUsize::new(0),
        })
    }

    pub fn endpoint(&self) -> &ServiceEndpoint {
        &self.endpoint
    }

    /// Total HTTP requests sent, including retries.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn cached<F>(&self, op: &str, payload: &Value, fetch: F) -> Result<Value, ClientError>
    where
        F: FnOnce() -> Result<Value, ClientError>,
    {
        let Some(cache) = &self.cache else {
            return fetch();
        };
        let key = ResponseCache::key(&self.endpoint.id, op, payload);
        if let Some(v) = cache.get(&key) {
            log::trace!("{} {op}: cache hit {}", self.endpoint.id, &key[..12]);
            return Ok(v);
        }
        let v = fetch()?;
        cache.put(&key, &v)?;
        Ok(v)
    }

    /// POSTs `payload` to `{base}/v1/{op}`, retrying transport failures,
    /// HTTP 429 and 5xx responses per the backoff schedule.
    pub fn post(&self, op: &str, payload: &Value) -> Result<Value, ClientError> {
        let url = format!("{}/v1/{op}", self.endpoint.base_url.trim_end_matches('/'));
        let body = canonical_json(payload);
        let req_hash = sha256_hex(body.as_bytes());
        let max_attempts = self.endpoint.max_retries + 1;
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = self.in_flight.acquire();
                self.requests.fetch_add(1, Ordering::SeqCst);
                let mut req = self
                    .agent
                    .post(&url)
                    .set("Content-Type", "application/json");
                if let Some(key) = &self.endpoint.api_key {
                    req = req.set("Authorization", &format!("Bearer {key}"));
                }
                req.send_string(&body)
            };
            let retry_reason = match outcome {
                Ok(resp) => {
                    let text = resp.into_string().map_err(|e| ClientError::Transport {
                        endpoint: self.endpoint.id.clone(),
                        attempts: attempt,
                        message: e.to_string(),
                    })?;
                    log::debug!(
                        "{} {op} request={} response={}",
                        self.endpoint.id,
                        &req_hash[..16],
                        &sha256_hex(text.as_bytes())[..16]
                    );
                    return serde_json::from_str(&text).map_err(|e| ClientError::Protocol {
                        endpoint: self.endpoint.id.clone(),
                        message: format!("response is not JSON: {e}"),
                    });
                }
                Err(ureq::Error::Status(status, resp)) => {
                    let body = resp.into_string().unwrap_or_default();
                    let retryable = status == 429 || status >= 500;
                    if !retryable || attempt >= max_attempts {
                        return Err(ClientError::Status {
                            endpoint: self.endpoint.id.clone(),
                            status,
                            body,
                            attempts: attempt,
                        });
                    }
                    format!("HTTP {status}")
                }
                Err(ureq::Error::Transport(t)) => {
                    if attempt >= max_attempts {
                        return Err(ClientError::Transport {
                            endpoint: self.endpoint.id.clone(),
                            attempts: attempt,
                            message: t.to_string(),
                        });
                    }
                    t.to_string()
                }
            };
            let delay = self.endpoint.backoff(attempt as usize - 1);
            log::warn!(
                "{} {op} attempt {attempt}/{max_attempts} failed ({retry_reason}); retrying in {delay:?}",
                self.endpoint.id
            );
            std::thread::sleep(delay);
        }
    }

    fn protocol(&self, message: impl Into<String>) -> ClientError {
        ClientError::Protocol {
            endpoint: self.endpoint.id.clone(),
            message: message.into(),
        }
    }
}

pub struct HttpChatClient {
    transport: HttpTransport,
}

impl HttpChatClient {
    pub fn new(endpoint: ServiceEndpoint) -> Result<Self, ClientError> {
        Ok(Self {
            transport: HttpTransport::new(endpoint)?,
        })
    }

    pub fn transport(&self) -> &HttpTransport {
        &self.transport
    }
}

impl ChatClient for HttpChatClient {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        if messages.is_empty() {
            return Err(ClientError::InvalidRequest("no chat messages".into()));
        }
        let ep = self.transport.endpoint();
        let payload = json!({
            "model": ep.model,
            "messages": messages,
            "temperature": ep.temperature,
            "top_p": ep.top_p,
        });
        let resp = self
            .transport
            .cached("chat", &payload, || self.transport.post("chat", &payload))?;
        resp.get("content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| self.transport.protocol("chat response lacks string `content`"))
    }
}

pub struct HttpEmbeddingClient {
    transport: HttpTransport,
}

impl HttpEmbeddingClient {
    pub fn new(endpoint: ServiceEndpoint) -> Result<Self, ClientError> {
        Ok(Self {
            transport: HttpTransport::new(endpoint)?,
        })
    }

    pub fn transport(&self) -> &HttpTransport {
        &self.transport
    }

    fn fetch_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        let payload = json!({ "model": self.transport.endpoint().model, "texts": texts });
        let resp = self.transport.post("embed", &payload)?;
        let vectors: Vec<Vec<f64>> = resp
            .get("vectors")
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| self.transport.protocol("embed response lacks numeric `vectors`"))?;
        if vectors.len() != texts.len() {
            return Err(self.transport.protocol(format!(
                "sent {} texts, received {} vectors",
                texts.len(),
                vectors.len()
            )));
        }
        vectors
            .into_iter()
            .map(|v| EmbeddingVector::new(v).map_err(|m| self.transport.protocol(m)))
            .collect()
    }
}

impl EmbeddingClient for HttpEmbeddingClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let ep = self.transport.endpoint();
        let key_of = |t: &String| ResponseCache::key(&ep.id, "embed", &json!({"model": ep.model, "text": t}));
        let mut resolved: HashMap<&str, EmbeddingVector> = HashMap::new();
        let mut misses: Vec<String> = Vec::new();
        for text in texts {
            if resolved.contains_key(text.as_str()) || misses.contains(text) {
                continue;
            }
            let hit = self
                .transport
                .cache
                .as_ref()
                .and_then(|c| c.get(&key_of(text)))
                .and_then(|v| serde_json::from_value::<EmbeddingVector>(v).ok());
            match hit {
                Some(v) => {
                    resolved.insert(text.as_str(), v);
                }
                None => misses.push(text.clone()),
            }
        }
        let chunks: Vec<&[String]> = misses.chunks(ep.max_batch).collect();
        let fetched = ordered_map(&chunks, ep.max_in_flight, |chunk| self.fetch_batch(chunk));
        let mut fresh: HashMap<&str, EmbeddingVector> = HashMap::new();
        for (chunk, result) in chunks.iter().zip(fetched) {
            for (text, vector) in chunk.iter().zip(result?) {
                if let Some(cache) = &self.transport.cache {
                    cache.put(&key_of(text), &serde_json::to_value(&vector).expect("vector serializes"))?;
                }
                fresh.insert(text.as_str(), vector);
            }
        }
        let out: Vec<EmbeddingVector> = texts
            .iter()
            .map(|t| {
                resolved
                    .get(t.as_str())
                    .or_else(|| fresh.get(t.as_str()))
                    .cloned()
                    .expect("every text resolved")
            })
            .collect();
        let dim = out[0].dim();
        if let Some(bad) = out.iter().find(|v| v.dim() != dim) {
            return Err(self.transport.protocol(format!(
                "embedding dimension mismatch: {} vs {}",
                dim,
                bad.dim()
            )));
        }
        Ok(out)
    }
}

pub struct HttpRerankClient {
    transport: HttpTransport,
}

impl HttpRerankClient {
    pub fn new(endpoint: ServiceEndpoint) -> Result<Self, ClientError> {
        Ok(Self {
            transport: HttpTransport::new(endpoint)?,
        })
    }

    pub fn transport(&self) -> &HttpTransport {
        &self.transport
    }

    fn score_batch(&self, query: &str, passages: &[String]) -> Result<Vec<f64>, ClientError> {
        let payload = json!({
            "model": self.transport.endpoint().model,
            "query": query,
            "passages": passages,
        });
        let resp = self
            .transport
            .cached("rerank", &payload, || self.transport.post("rerank", &payload))?;
        let scores: Vec<f64> = resp
            .get("scores")
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| self.transport.protocol("rerank response lacks numeric `scores`"))?;
        if scores.len() != passages.len() {
            return Err(self.transport.protocol(format!(
                "sent {} passages, received {} scores",
                passages.len(),
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !(s.is_finite() && (0.0..=1.0).contains(*s))) {
            return Err(self
                .transport
                .protocol(format!("score {bad} outside the calibrated range [0,1]")));
        }
        Ok(scores)
    }
}

impl RerankClient for HttpRerankClient {
    fn id(&self) -> &str {
        &self.transport.endpoint().id
    }

    fn rerank(&self, query: &str, passages: &[String]) -> Result<Vec<f64>, ClientError> {
        if passages.is_empty() {
            return Err(ClientError::InvalidRequest("no passages to rerank".into()));
        }
        let mut out = Vec::with_capacity(passages.len());
        for chunk in passages.chunks(self.transport.endpoint().max_batch) {
            out.extend(self.score_batch(query, chunk)?);
        }
        Ok(out)
    }
}

/// The full set of services a pipeline run needs.
#[derive(Clone)]
pub struct Services {
    pub chat: Option<Arc<dyn ChatClient>>,
    pub embed: Option<Arc<dyn EmbeddingClient>>,
    pub rerankers: Vec<Arc<dyn RerankClient>>,
}

/// Endpoint whose `base_url` uses the `mock://<seed>` scheme is served by
/// the in-process deterministic models of [`crate::mock`].
pub fn mock_seed(endpoint: &ServiceEndpoint) -> Option<u64> {
    let rest = endpoint.base_url.strip_prefix("mock://")?;
    Some(rest.trim_matches('/').parse().unwrap_or(0))
}

pub fn chat_client(endpoint: &ServiceEndpoint) -> Result<Arc<dyn ChatClient>, ClientError> {
    match mock_seed(endpoint) {
        Some(seed) => Ok(Arc::new(crate::mock::MockChat::new(seed))),
        None => Ok(Arc::new(HttpChatClient::new(endpoint.clone())?)),
    }
}

pub fn embedding_client(endpoint: &ServiceEndpoint) -> Result<Arc<dyn EmbeddingClient>, ClientError> {
    match mock_seed(endpoint) {
        Some(seed) => Ok(Arc::new(crate::mock::MockEmbedder::new(seed, 64))),
        None => Ok(Arc::new(HttpEmbeddingClient::new(endpoint.clone())?)),
    }
}

pub fn rerank_client(endpoint: &ServiceEndpoint) -> Result<Arc<dyn RerankClient>, ClientError> {
    match mock_seed(endpoint) {
        Some(seed) => Ok(Arc::new(crate::mock::MockReranker::new(endpoint.id.clone(), seed))),
        None => Ok(Arc::new(HttpRerankClient::new(endpoint.clone())?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_json_sorts_keys() {
        let v = json!({"b": 1, "a": {"d": [1, {"z": 0, "y": 1}], "c": "x"}});
        assert_eq!(canonical_json(&v), r#"{"a":{"c":"x","d":[1,{"y":1,"z":0}]},"b":1}"#);
    }

    #[test]
    fn cache_key_depends_on_all_parts() {
        let p = json!({"q": 1});
        let k = ResponseCache::key("ep", "embed", &p);
        assert_ne!(k, ResponseCache::key("ep2", "embed", &p));
        assert_ne!(k, ResponseCache::key("ep", "rerank", &p));
        assert_ne!(k, ResponseCache::key("ep", "embed", &json!({"q": 2})));
        assert_eq!(k.len(), 64);
    }

    #[test]
    fn disk_cache_persists() {
        let dir = tempfile::tempdir().unwrap();
        let key = ResponseCache::key("ep", "chat", &json!({}));
        ResponseCache::new(Some(dir.path().into()))
            .put(&key, &json!({"content": "hi"}))
            .unwrap();
        let fresh = ResponseCache::new(Some(dir.path().into()));
        assert_eq!(fresh.get(&key), Some(json!({"content": "hi"})));
    }

    #[test]
    fn endpoint_validation() {
        let mut ep = ServiceEndpoint::new("x", "http://localhost");
        assert!(ep.validate().is_ok());
        ep.max_batch = 0;
        assert!(ep.validate().is_err());
        let mut ep = ServiceEndpoint::new("x", "http://localhost");
        ep.timeout_secs = 0.0;
        assert!(ep.validate().is_err());
    }

    #[test]
    fn api_key_var_is_sanitized() {
        let ep = ServiceEndpoint::new("bge-reranker.v2", "http://x");
        assert_eq!(ep.api_key_var(), "POSFORGE_API_KEY_BGE_RERANKER_V2");
    }

    #[test]
    fn embedding_vector_rejects_non_finite() {
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
        assert_eq!(EmbeddingVector::new(vec![1.0, 2.0]).unwrap().dim(), 2);
    }

    #[test]
    fn mock_scheme_detected() {
        assert_eq!(mock_seed(&ServiceEndpoint::new("a", "mock://7")), Some(7));
        assert_eq!(mock_seed(&ServiceEndpoint::new("a", "http://h")), None);
    }
}
