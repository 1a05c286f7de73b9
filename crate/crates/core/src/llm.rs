//! Stateless chat-completion access with record/replay transcripts.
//!
//! A request carries everything the model sees; there is no conversation
//! identifier anywhere, so every call is independent.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{debug, warn};

use crate::fetch::RateLimiter;
use crate::text::sha256_hex;
use crate::workspace::write_atomic;

pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("provider error for `{tag}` after {attempts} attempt(s): {message}")]
    Provider {
        tag: String,
        attempts: u32,
        message: String,
    },
    #[error("no recorded response for `{tag}` (hash {hash})")]
    ReplayMiss { tag: String, hash: String },
    #[error("attachment `{name}` is {size} bytes, limit is {limit}")]
    AttachmentTooLarge { name: String, size: usize, limit: usize },
    #[error("provider `{0}` does not accept file attachments; use inline mode")]
    FileUploadUnsupported(String),
    #[error("no provider configured for {0} mode")]
    NoProvider(&'static str),
    #[error("transcript store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failure reported by a provider. Transient failures are retried.
#[derive(Debug, Clone, Error)]
pub enum ProviderError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Permanent(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub name: String,
    pub media_type: String,
    #[serde(skip)]
    pub content: Vec<u8>,
}

impl Attachment {
    pub fn new(name: impl Into<String>, media_type: impl Into<String>, content: Vec<u8>) -> Self {
        Attachment {
            name: name.into(),
            media_type: media_type.into(),
            content,
        }
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.content)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model_id: String,
    pub system_text: Option<String>,
    pub user_text: String,
    pub attachments: Vec<Attachment>,
    pub temperature: f64,
    pub max_output: u32,
    /// `<stage>:<package>:<practice>[:<scope>]`, for audit only.
    pub request_tag: String,
    /// Repetition index of an otherwise identical request (1-based). Lets
    /// repeated runs record and replay distinct responses.
    pub sample: u32,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, user_text: impl Into<String>) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            system_text: None,
            user_text: user_text.into(),
            attachments: Vec::new(),
            temperature: 0.0,
            max_output: 8192,
            request_tag: String::new(),
            sample: 1,
        }
    }

    pub fn with_system(mut self, text: impl Into<String>) -> Self {
        self.system_text = Some(text.into());
        self
    }

    pub fn with_attachment(mut self, a: Attachment) -> Self {
        self.attachments.push(a);
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.request_tag = tag.into();
        self
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_sample(mut self, n: u32) -> Self {
        self.sample = n;
        self
    }

    pub fn attachment(&self, name: &str) -> Option<&Attachment> {
        self.attachments.iter().find(|a| a.name == name)
    }
}

/// Digest of everything that determines the model's answer: model id,
/// system and user text, attachment media types and content digests, and
/// temperature, plus the sample index when above 1. The tag and output
/// budget are excluded.
pub fn canonical_hash(req: &ChatRequest) -> String {
    let attachments: Vec<Value> = req
        .attachments
        .iter()
        .map(|a| json!({ "media_type": a.media_type, "sha256": a.digest() }))
        .collect();
    // serde_json maps are key-sorted, so field order cannot leak in
    let mut canon = json!({
        "attachments": attachments,
        "model_id": req.model_id,
        "system_text": req.system_text,
        "temperature": format!("{:.6}", req.temperature),
        "user_text": req.user_text,
    });
    // first samples keep the plain form
    if req.sample > 1 {
        canon["sample"] = json!(req.sample);
    }
    sha256_hex(canon.to_string().as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    ContentFilter,
    Other,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
    pub latency_ms: u64,
    #[serde(default)]
    pub provider_meta: BTreeMap<String, Value>,
}

pub trait ChatProvider: Send + Sync {
    fn name(&self) -> &str;
    fn supports_file_upload(&self) -> bool;
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptMode {
    Live,
    Record,
    #[default]
    Replay,
}

impl std::str::FromStr for TranscriptMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "live" => Ok(TranscriptMode::Live),
            "record" => Ok(TranscriptMode::Record),
            "replay" => Ok(TranscriptMode::Replay),
            other => Err(format!("unknown transcript mode `{other}`")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredEntry {
    schema_version: u32,
    hash: String,
    request_tag: String,
    model_id: String,
    response: ChatResponse,
}

/// Content-addressed transcript directory:
/// `entries/<hash>.json` plus an `index.json` manifest (hash → tag).
#[derive(Debug)]
pub struct TranscriptStore {
    dir: Option<PathBuf>,
    mode: TranscriptMode,
    write_lock: Mutex<()>,
}

impl TranscriptStore {
    pub fn new(dir: Option<PathBuf>, mode: TranscriptMode) -> Self {
        TranscriptStore {
            dir,
            mode,
            write_lock: Mutex::new(()),
        }
    }

    pub fn mode(&self) -> TranscriptMode {
        self.mode
    }

    fn entry_path(&self, hash: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join("entries").join(format!("{hash}.json")))
    }

    pub fn get(&self, hash: &str) -> Result<Option<ChatResponse>, LlmError> {
        let Some(path) = self.entry_path(hash) else {
            return Ok(None);
        };
        match fs::read(&path) {
            Ok(bytes) => {
                let e: StoredEntry = serde_json::from_slice(&bytes)
                    .map_err(|e| LlmError::Store(format!("{}: {e}", path.display())))?;
                Ok(Some(e.response))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Stores a response unless one already exists for the hash.
    /// Returns whether this call wrote the entry.
    pub fn put(&self, hash: &str, req: &ChatRequest, resp: &ChatResponse) -> Result<bool, LlmError> {
        let (Some(dir), Some(path)) = (self.dir.as_ref(), self.entry_path(hash)) else {
            return Err(LlmError::Store("record mode needs a transcript directory".into()));
        };
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        if path.exists() {
            return Ok(false);
        }
        let entry = StoredEntry {
            schema_version: TRANSCRIPT_SCHEMA_VERSION,
            hash: hash.to_string(),
            request_tag: req.request_tag.clone(),
            model_id: req.model_id.clone(),
            response: resp.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&entry).expect("entry serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        let index_path = dir.join("index.json");
        let mut index: BTreeMap<String, String> = fs::read(&index_path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        index.insert(hash.to_string(), req.request_tag.clone());
        let mut bytes = serde_json::to_vec_pretty(&index).expect("index serializes");
        bytes.push(b'\n');
        write_atomic(&index_path, &bytes)?;
        Ok(true)
    }

    pub fn len(&self) -> usize {
        self.dir
            .as_ref()
            .and_then(|d| fs::read_dir(d.join("entries")).ok())
            .map_or(0, |rd| rd.count())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay: Duration::from_secs(2),
            max_delay: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Front door for every model call.
pub struct LlmClient {
    provider: Option<Arc<dyn ChatProvider>>,
    store: TranscriptStore,
    retry: RetryPolicy,
    limiter: Option<Arc<RateLimiter>>,
    max_attachment_bytes: usize,
}

impl LlmClient {
    pub fn new(provider: Option<Arc<dyn ChatProvider>>, store: TranscriptStore) -> Self {
        LlmClient {
            provider,
            store,
            retry: RetryPolicy::default(),
            limiter: None,
            max_attachment_bytes: 20 * 1024 * 1024,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_limiter(mut self, limiter: Arc<RateLimiter>) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn with_max_attachment_bytes(mut self, n: usize) -> Self {
        self.max_attachment_bytes = n;
        self
    }

    pub fn mode(&self) -> TranscriptMode {
        self.store.mode()
    }

    pub fn store(&self) -> &TranscriptStore {
        &self.store
    }

    /// Whether file attachments can be sent. Replay mode accepts whatever
    /// was recorded.
    pub fn supports_file_upload(&self) -> bool {
        match self.store.mode() {
            TranscriptMode::Replay => true,
            _ => self.provider.as_ref().is_some_and(|p| p.supports_file_upload()),
        }
    }

    /// One stateless completion. `audit_dir` receives a request/response log
    /// entry for every call that reaches the provider.
    pub fn complete(&self, req: &ChatRequest, audit_dir: Option<&Path>) -> Result<ChatResponse, LlmError> {
        for a in &req.attachments {
            if a.content.len() > self.max_attachment_bytes {
                return Err(LlmError::AttachmentTooLarge {
                    name: a.name.clone(),
                    size: a.content.len(),
                    limit: self.max_attachment_bytes,
                });
            }
        }
        let hash = canonical_hash(req);
        match self.store.mode() {
            TranscriptMode::Replay => {
                debug!(tag = %req.request_tag, %hash, "replay lookup");
                self.store.get(&hash)?.ok_or_else(|| LlmError::ReplayMiss {
                    tag: req.request_tag.clone(),
                    hash,
                })
            }
            TranscriptMode::Live => self.call_provider(req, &hash, audit_dir, "live"),
            TranscriptMode::Record => {
                let resp = self.call_provider(req, &hash, audit_dir, "record")?;
                self.store.put(&hash, req, &resp)?;
                Ok(resp)
            }
        }
    }

    fn call_provider(
        &self,
        req: &ChatRequest,
        hash: &str,
        audit_dir: Option<&Path>,
        mode: &'static str,
    ) -> Result<ChatResponse, LlmError> {
        let provider = self.provider.as_ref().ok_or(LlmError::NoProvider(mode))?;
        if !req.attachments.is_empty() && !provider.supports_file_upload() {
            return Err(LlmError::FileUploadUnsupported(provider.name().to_string()));
        }
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            let started = Instant::now();
            let result = provider.send(req);
            match result {
                Ok(mut resp) => {
                    if resp.latency_ms == 0 {
                        resp.latency_ms = started.elapsed().as_millis() as u64;
                    }
                    if let Some(dir) = audit_dir {
                        audit(dir, req, hash, Some(&resp), None)?;
                    }
                    return Ok(resp);
                }
                Err(ProviderError::Transient(msg)) if attempt < self.retry.max_attempts => {
                    let delay = self.retry.delay(attempt);
                    warn!(tag = %req.request_tag, attempt, ?delay, "transient provider error: {msg}");
                    std::thread::sleep(delay);
                }
                Err(e) => {
                    if let Some(dir) = audit_dir {
                        audit(dir, req, hash, None, Some(&e.to_string()))?;
                    }
                    return Err(LlmError::Provider {
                        tag: req.request_tag.clone(),
                        attempts: attempt,
                        message: e.to_string(),
                    });
                }
            }
        }
    }
}

fn audit(
    dir: &Path,
    req: &ChatRequest,
    hash: &str,
    resp: Option<&ChatResponse>,
    error: Option<&str>,
) -> Result<(), LlmError> {
    let attachments: Vec<Value> = req
        .attachments
        .iter()
        .map(|a| json!({"name": a.name, "media_type": a.media_type, "bytes": a.content.len(), "sha256": a.digest()}))
        .collect();
    let record = json!({
        "request_tag": req.request_tag,
        "hash": hash,
        "request": {
            "model_id": req.model_id,
            "temperature": req.temperature,
            "max_output": req.max_output,
            "system_text": req.system_text,
            "user_text": req.user_text,
            "attachments": attachments,
        },
        "response": resp,
        "error": error,
    });
    let slug: String = req
        .request_tag
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    let path = dir.join(format!("{slug}-{}.json", &hash[..12]));
    let mut bytes = serde_json::to_vec_pretty(&record).expect("audit serializes");
    bytes.push(b'\n');
    write_atomic(&path, &bytes)?;
    Ok(())
}

/// Chat-completions endpoint in the widely implemented OpenAI wire format.
/// PDF attachments are sent as base64 `file` parts; text attachments are
/// sent as additional text parts.
pub struct OpenAiCompatibleProvider {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    file_upload: bool,
}

impl OpenAiCompatibleProvider {
    /// `api_key_env` names the environment variable holding the key.
    pub fn new(endpoint: impl Into<String>, api_key_env: &str, timeout: Duration, file_upload: bool) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        OpenAiCompatibleProvider {
            endpoint: endpoint.into(),
            api_key: std::env::var(api_key_env).ok().filter(|k| !k.is_empty()),
            agent: config.into(),
            file_upload,
        }
    }

    fn body(&self, req: &ChatRequest) -> Value {
        let mut parts = vec![json!({"type": "text", "text": req.user_text})];
        for a in &req.attachments {
            if a.media_type == "application/pdf" {
                let data = base64::engine::general_purpose::STANDARD.encode(&a.content);
                parts.push(json!({
                    "type": "file",
                    "file": {"filename": a.name, "file_data": format!("data:application/pdf;base64,{data}")}
                }));
            } else {
                parts.push(json!({
                    "type": "text",
                    "text": format!("[{}]\n{}", a.name, String::from_utf8_lossy(&a.content))
                }));
            }
        }
        let mut messages = Vec::new();
        if let Some(s) = &req.system_text {
            messages.push(json!({"role": "system", "content": s}));
        }
        messages.push(json!({"role": "user", "content": parts}));
        json!({
            "model": req.model_id,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output,
        })
    }
}

impl ChatProvider for OpenAiCompatibleProvider {
    fn name(&self) -> &str {
        "openai-compatible"
    }

    fn supports_file_upload(&self) -> bool {
        self.file_upload
    }

    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let url = format!("{}/chat/completions", self.endpoint.trim_end_matches('/'));
        let mut call = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {k}"));
        }
        let started = Instant::now();
        let mut resp = call
            .send(self.body(req).to_string())
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(ProviderError::Transient(format!("HTTP {status}: {text}")));
        }
        if status >= 400 {
            return Err(ProviderError::Permanent(format!("HTTP {status}: {text}")));
        }
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| ProviderError::Permanent(format!("bad response body: {e}")))?;
        let choice = &v["choices"][0];
        let content = choice["message"]["content"]
            .as_str()
            .ok_or_else(|| ProviderError::Permanent("response has no message content".into()))?;
        let finish_reason = match choice["finish_reason"].as_str() {
            Some("stop") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            Some("content_filter") => FinishReason::ContentFilter,
            _ => FinishReason::Other,
        };
        let mut meta = BTreeMap::new();
        if let Some(m) = v.get("model") {
            meta.insert("model".to_string(), m.clone());
        }
        if let Some(id) = v.get("id") {
            meta.insert("id".to_string(), id.clone());
        }
        Ok(ChatResponse {
            text: content.to_string(),
            finish_reason,
            usage: Usage {
                input_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
                output_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
            },
            latency_ms: started.elapsed().as_millis() as u64,
            provider_meta: meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Echo {
        calls: AtomicUsize,
        fail_first: usize,
    }

    impl ChatProvider for Echo {
        fn name(&self) -> &str {
            "echo"
        }
        fn supports_file_upload(&self) -> bool {
            true
        }
        fn send(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err(ProviderError::Transient("busy".into()));
            }
            Ok(ChatResponse {
                text: format!("echo: {}", req.user_text),
                finish_reason: FinishReason::Stop,
                usage: Usage::default(),
                latency_ms: 1,
                provider_meta: BTreeMap::new(),
            })
        }
    }

    fn req() -> ChatRequest {
        ChatRequest::new("m1", "hello").with_tag("analyze:com.x:collection")
    }

    #[test]
    fn hash_properties() {
        let a = ChatRequest::new("m1", "hi").with_system("sys").with_tag("a");
        let mut b = ChatRequest::new("m1", "hi");
        b.request_tag = "b".into();
        b.max_output = 10;
        b.system_text = Some("sys".into());
        assert_eq!(canonical_hash(&a), canonical_hash(&b));
        assert_ne!(canonical_hash(&a), canonical_hash(&a.clone().with_temperature(0.2)));
        let mut c = a.clone();
        c.model_id = "m2".into();
        assert_ne!(canonical_hash(&a), canonical_hash(&c));
        let x = a.clone().with_attachment(Attachment::new("f", "text/plain", b"1".to_vec()));
        let y = a.clone().with_attachment(Attachment::new("f", "text/plain", b"2".to_vec()));
        assert_ne!(canonical_hash(&x), canonical_hash(&y));
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let provider = Arc::new(Echo { calls: AtomicUsize::new(0), fail_first: 0 });
        let rec = LlmClient::new(
            Some(provider.clone()),
            TranscriptStore::new(Some(dir.path().to_path_buf()), TranscriptMode::Record),
        );
        let live = rec.complete(&req(), None).unwrap();
        rec.complete(&req(), None).unwrap();
        assert_eq!(rec.store().len(), 1);

        let rep = LlmClient::new(None, TranscriptStore::new(Some(dir.path().to_path_buf()), TranscriptMode::Replay));
        assert_eq!(rep.complete(&req(), None).unwrap().text, live.text);
        match rep.complete(&ChatRequest::new("m1", "unseen").with_tag("analyze:com.y"), None) {
            Err(LlmError::ReplayMiss { tag, .. }) => assert_eq!(tag, "analyze:com.y"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn transient_errors_retry_then_surface() {
        let fast = RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(2),
        };
        let ok = LlmClient::new(
            Some(Arc::new(Echo { calls: AtomicUsize::new(0), fail_first: 2 })),
            TranscriptStore::new(None, TranscriptMode::Live),
        )
        .with_retry(fast);
        assert!(ok.complete(&req(), None).is_ok());
        let bad = LlmClient::new(
            Some(Arc::new(Echo { calls: AtomicUsize::new(0), fail_first: 5 })),
            TranscriptStore::new(None, TranscriptMode::Live),
        )
        .with_retry(fast);
        assert!(matches!(bad.complete(&req(), None), Err(LlmError::Provider { attempts: 3, .. })));
    }

    #[test]
    fn attachment_limit() {
        let c = LlmClient::new(None, TranscriptStore::new(None, TranscriptMode::Replay)).with_max_attachment_bytes(2);
        let r = req().with_attachment(Attachment::new("big", "text/plain", b"abc".to_vec()));
        assert!(matches!(c.complete(&r, None), Err(LlmError::AttachmentTooLarge { .. })));
    }
}
