//! Page retrieval: the captured-payload format, fetcher implementations and
//! the shared rate limiter.
//!
//! Every fetched resource (store listing, privacy policy) is represented as a
//! [`CapturedPayload`] so that live capture, third-party scraper output and
//! hand-built fixtures all go through the same parsers.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::sha256_hex;

pub const CAPTURE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("request to {url} failed: {message}")]
    Network { url: String, message: String },
    #[error("{url} answered HTTP {status}")]
    Http { url: String, status: u16 },
    #[error("no fixture captured for {0}")]
    NoFixture(String),
    #[error("live fetching is disabled (offline/replay mode): {0}")]
    Offline(String),
    #[error("capture file {path}: {message}")]
    Capture { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw bytes plus the metadata needed to parse and audit them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedPayload {
    pub url: String,
    pub content_type: String,
    pub captured_at: DateTime<Utc>,
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaptureMeta {
    schema_version: u32,
    url: String,
    content_type: String,
    captured_at: DateTime<Utc>,
    #[serde(default = "default_status")]
    status: u16,
    body_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sha256: Option<String>,
}

fn default_status() -> u16 {
    200
}

impl CapturedPayload {
    pub fn new(url: impl Into<String>, content_type: impl Into<String>, body: Vec<u8>) -> Self {
        CapturedPayload {
            url: url.into(),
            content_type: content_type.into(),
            captured_at: Utc::now().trunc_subsecs(0),
            status: 200,
            body,
        }
    }

    pub fn with_captured_at(mut self, at: DateTime<Utc>) -> Self {
        self.captured_at = at;
        self
    }

    /// Lowercased media type without parameters.
    pub fn media_type(&self) -> String {
        self.content_type
            .split(';')
            .next()
            .unwrap_or("")
            .trim()
            .to_ascii_lowercase()
    }

    pub fn is_pdf(&self) -> bool {
        self.media_type() == "application/pdf" || self.body.starts_with(b"%PDF-")
    }

    pub fn body_text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }

    pub fn extension(&self) -> &'static str {
        if self.is_pdf() {
            return "pdf";
        }
        match self.media_type().as_str() {
            "text/html" | "application/xhtml+xml" => "html",
            "application/json" => "json",
            _ => "txt",
        }
    }

    /// Writes `<stem>.<ext>` and `<stem>.capture.json` into `dir`.
    /// Returns the metadata path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf, FetchError> {
        fs::create_dir_all(dir)?;
        let body_file = format!("{stem}.{}", self.extension());
        crate::workspace::write_atomic(&dir.join(&body_file), &self.body)?;
        let meta = CaptureMeta {
            schema_version: CAPTURE_SCHEMA_VERSION,
            url: self.url.clone(),
            content_type: self.content_type.clone(),
            captured_at: self.captured_at,
            status: self.status,
            body_file,
            sha256: Some(sha256_hex(&self.body)),
        };
        let meta_path = dir.join(format!("{stem}.capture.json"));
        let mut json = serde_json::to_vec_pretty(&meta).expect("capture meta serializes");
        json.push(b'\n');
        crate::workspace::write_atomic(&meta_path, &json)?;
        Ok(meta_path)
    }

    pub fn load(meta_path: &Path) -> Result<Self, FetchError> {
        let bad = |message: String| FetchError::Capture {
            path: meta_path.to_path_buf(),
            message,
        };
        let meta: CaptureMeta = serde_json::from_slice(&fs::read(meta_path)?)
            .map_err(|e| bad(e.to_string()))?;
        if meta.schema_version != CAPTURE_SCHEMA_VERSION {
            return Err(bad(format!("unsupported schema_version {}", meta.schema_version)));
        }
        let body_path = meta_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&meta.body_file);
        let body = fs::read(&body_path)?;
        if let Some(expected) = &meta.sha256 {
            if &sha256_hex(&body) != expected {
                return Err(bad(format!("{} does not match its recorded digest", meta.body_file)));
            }
        }
        Ok(CapturedPayload {
            url: meta.url,
            content_type: meta.content_type,
            captured_at: meta.captured_at,
            status: meta.status,
            body,
        })
    }
}

/// Anything that can turn a URL into a captured payload.
pub trait PageFetcher: Send + Sync {
    fn fetch(&self, url: &str) -> Result<CapturedPayload, FetchError>;

    /// Whether this fetcher touches the network.
    fn is_live(&self) -> bool {
        true
    }
}

/// Minimum-interval limiter shared by every fetch that goes through it.
///
/// `acquire` holds the lock while sleeping, so callers are serialized and
/// consecutive grants are at least `interval` apart.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    epoch: Instant,
    last: Mutex<Option<Instant>>,
}

impl RateLimiter {
    /// One request every 357 seconds, the conservative research-crawl pace.
    pub const POLITE_INTERVAL: Duration = Duration::from_secs(357);

    pub fn new(interval: Duration) -> Self {
        RateLimiter {
            interval,
            epoch: Instant::now(),
            last: Mutex::new(None),
        }
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    /// Blocks until a request may start; returns the grant time as an offset
    /// from the limiter's creation.
    pub fn acquire(&self) -> Duration {
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let due = prev + self.interval;
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
        let now = Instant::now();
        *last = Some(now);
        now.duration_since(self.epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchLogEntry {
    pub url: String,
    pub at: DateTime<Utc>,
    /// Monotonic offset of the rate-limiter grant, in milliseconds.
    pub offset_ms: f64,
    pub status: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct FetchLog(Arc<Mutex<Vec<FetchLogEntry>>>);

impl FetchLog {
    pub fn push(&self, entry: FetchLogEntry) {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).push(entry);
    }

    pub fn entries(&self) -> Vec<FetchLogEntry> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Gaps between consecutive grants, in grant order.
    pub fn gaps(&self) -> Vec<Duration> {
        let mut offsets: Vec<f64> = self.entries().iter().map(|e| e.offset_ms).collect();
        offsets.sort_by(f64::total_cmp);
        offsets
            .windows(2)
            .map(|w| Duration::from_secs_f64((w[1] - w[0]) / 1000.0))
            .collect()
    }
}

/// Plain HTTP fetcher with a custom user agent and a shared rate limiter.
pub struct HttpFetcher {
    agent: ureq::Agent,
    user_agent: String,
    limiter: Arc<RateLimiter>,
    log: FetchLog,
    max_body_bytes: u64,
}

impl HttpFetcher {
    pub const DEFAULT_USER_AGENT: &'static str = "Mozilla/5.0 (Linux; Android 14; Pixel 8) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/126.0.0.0 Mobile Safari/537.36";

    pub fn new(user_agent: impl Into<String>, limiter: Arc<RateLimiter>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        HttpFetcher {
            agent: config.into(),
            user_agent: user_agent.into(),
            limiter,
            log: FetchLog::default(),
            max_body_bytes: 64 * 1024 * 1024,
        }
    }

    pub fn log(&self) -> &FetchLog {
        &self.log
    }
}

impl PageFetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> Result<CapturedPayload, FetchError> {
        let offset = self.limiter.acquire();
        let at = Utc::now();
        let mut entry = FetchLogEntry {
            url: url.to_string(),
            at,
            offset_ms: offset.as_secs_f64() * 1000.0,
            status: None,
            error: None,
        };
        let result = (|| {
            let mut resp = self
                .agent
                .get(url)
                .header("User-Agent", &self.user_agent)
                .call()
                .map_err(|e| FetchError::Network {
                    url: url.to_string(),
                    message: e.to_string(),
                })?;
            let status = resp.status().as_u16();
            let content_type = resp
                .headers()
                .get("content-type")
                .and_then(|v| v.to_str().ok())
                .unwrap_or("application/octet-stream")
                .to_string();
            let body = resp
                .body_mut()
                .with_config()
                .limit(self.max_body_bytes)
                .read_to_vec()
                .map_err(|e| FetchError::Network {
                    url: url.to_string(),
                    message: e.to_string(),
                })?;
            Ok::<_, FetchError>((status, content_type, body))
        })();
        match result {
            Ok((status, content_type, body)) => {
                entry.status = Some(status);
                self.log.push(entry);
                if !(200..300).contains(&status) {
                    return Err(FetchError::Http {
                        url: url.to_string(),
                        status,
                    });
                }
                let mut payload = CapturedPayload::new(url, content_type, body);
                payload.captured_at = at.trunc_subsecs(0);
                payload.status = status;
                Ok(payload)
            }
            Err(e) => {
                entry.error = Some(e.to_string());
                self.log.push(entry);
                Err(e)
            }
        }
    }
}

/// Serves previously captured payloads, keyed by URL. Never touches the
/// network.
#[derive(Debug, Default)]
pub struct FixtureFetcher {
    by_url: HashMap<String, PathBuf>,
}

impl FixtureFetcher {
    /// Indexes every `*.capture.json` below `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, FetchError> {
        let mut fetcher = FixtureFetcher::default();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            let mut entries: Vec<_> = fs::read_dir(&d)?.collect::<Result<_, _>>()?;
            entries.sort_by_key(|e| e.path());
            for e in entries {
                let path = e.path();
                if path.is_dir() {
                    stack.push(path);
                } else if path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.ends_with(".capture.json"))
                {
                    let meta: CaptureMeta = serde_json::from_slice(&fs::read(&path)?).map_err(
                        |err| FetchError::Capture {
                            path: path.clone(),
                            message: err.to_string(),
                        },
                    )?;
                    fetcher.by_url.insert(meta.url, path);
                }
            }
        }
        Ok(fetcher)
    }

    pub fn len(&self) -> usize {
        self.by_url.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_url.is_empty()
    }
}

impl PageFetcher for FixtureFetcher {
    fn fetch(&self, url: &str) -> Result<CapturedPayload, FetchError> {
        let path = self
            .by_url
            .get(url)
            .ok_or_else(|| FetchError::NoFixture(url.to_string()))?;
        CapturedPayload::load(path)
    }

    fn is_live(&self) -> bool {
        false
    }
}

/// Refuses every request.
#[derive(Debug, Default)]
pub struct OfflineFetcher;

impl PageFetcher for OfflineFetcher {
    fn fetch(&self, url: &str) -> Result<CapturedPayload, FetchError> {
        Err(FetchError::Offline(url.to_string()))
    }

    fn is_live(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = CapturedPayload::new("https://example.org/pp", "text/html; charset=utf-8", b"<p>x</p>".to_vec());
        let meta = p.save(dir.path(), "policy").unwrap();
        assert!(dir.path().join("policy.html").exists());
        assert_eq!(CapturedPayload::load(&meta).unwrap(), p);

        let f = FixtureFetcher::from_dir(dir.path()).unwrap();
        assert_eq!(f.fetch("https://example.org/pp").unwrap(), p);
        assert!(matches!(f.fetch("https://example.org/other"), Err(FetchError::NoFixture(_))));
    }

    #[test]
    fn tampered_body_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = CapturedPayload::new("u", "text/plain", b"abc".to_vec());
        let meta = p.save(dir.path(), "x").unwrap();
        fs::write(dir.path().join("x.txt"), b"abd").unwrap();
        assert!(matches!(CapturedPayload::load(&meta), Err(FetchError::Capture { .. })));
    }

    #[test]
    fn limiter_spaces_grants() {
        let lim = RateLimiter::new(Duration::from_millis(40));
        let a = lim.acquire();
        let b = lim.acquire();
        let c = lim.acquire();
        assert!(b - a >= Duration::from_millis(40));
        assert!(c - b >= Duration::from_millis(40));
    }

    #[test]
    fn pdf_sniffing() {
        let p = CapturedPayload::new("u", "application/octet-stream", b"%PDF-1.5 ...".to_vec());
        assert!(p.is_pdf());
        assert_eq!(p.extension(), "pdf");
    }
}
