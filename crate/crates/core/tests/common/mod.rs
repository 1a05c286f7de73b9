#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use dsscheck::dss::datasafety_url;
use dsscheck::fetch::{CapturedPayload, FetchError, PageFetcher};
use dsscheck::llm::{ChatProvider, ChatRequest, ChatResponse, ProviderError};
use dsscheck::orchestrator::{load_app_list, AppSpec};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn captured_at() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 3, 4, 12, 0, 0).unwrap()
}

pub fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("json") => "application/json",
        Some("pdf") => "application/pdf",
        _ => "text/plain; charset=utf-8",
    }
}

/// Writes captures for every fixture app into `dir` and returns the app list.
pub fn build_captures(dir: &Path) -> Vec<AppSpec> {
    let list = fixtures().join("apps.csv");
    let mut rdr = csv::Reader::from_path(&list).unwrap();
    for row in rdr.records() {
        let row = row.unwrap();
        let (pkg, dss_file, policy_url) = (&row[0], &row[2], &row[3]);
        let app_dir = fixtures().join("apps").join(pkg);
        let dss_path = app_dir.join(dss_file);
        CapturedPayload::new(
            datasafety_url(pkg),
            content_type(&dss_path),
            std::fs::read(&dss_path).unwrap(),
        )
        .with_captured_at(captured_at())
        .save(&dir.join(pkg), "dss")
        .unwrap();
        let policy_path = app_dir.join("policy.html");
        CapturedPayload::new(policy_url, content_type(&policy_path), std::fs::read(&policy_path).unwrap())
            .with_captured_at(captured_at())
            .save(&dir.join(pkg), "policy")
            .unwrap();
    }
    load_app_list(&list)
        .unwrap()
        .into_iter()
        .map(|mut a| {
            // the policy URL must come from the store listing
            a.policy_url = None;
            a
        })
        .collect()
}

/// Fetcher that counts calls and refuses them all.
#[derive(Default)]
pub struct CountingFetcher(pub AtomicUsize);

impl PageFetcher for CountingFetcher {
    fn fetch(&self, url: &str) -> Result<CapturedPayload, FetchError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Err(FetchError::Offline(url.to_string()))
    }
}

/// Provider wrapper that counts calls.
pub struct CountingProvider {
    pub inner: Arc<dyn ChatProvider>,
    pub calls: AtomicUsize,
}

impl CountingProvider {
    pub fn new(inner: Arc<dyn ChatProvider>) -> Self {
        CountingProvider {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatProvider for CountingProvider {
    fn name(&self) -> &str {
        "counting"
    }

    fn supports_file_upload(&self) -> bool {
        self.inner.supports_file_upload()
    }

    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.send(req)
    }
}

/// Every regular file below `root`, relative path to bytes.
pub fn tree_bytes(root: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// A request seen by [`FixtureServer`].
#[derive(Debug, Clone)]
pub struct SeenRequest {
    pub path: String,
    pub user_agent: String,
    pub at: std::time::Instant,
}

/// Minimal HTTP/1.1 server on 127.0.0.1 serving files from a directory.
pub struct FixtureServer {
    pub base: String,
    pub seen: Arc<std::sync::Mutex<Vec<SeenRequest>>>,
}

impl FixtureServer {
    pub fn start(root: PathBuf) -> Self {
        use std::io::{BufRead, BufReader, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let at = std::time::Instant::now();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).is_err() {
                    continue;
                }
                let mut user_agent = String::new();
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("user-agent:") {
                        user_agent = v.trim().to_string();
                    }
                }
                let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
                log.lock().unwrap().push(SeenRequest {
                    path: path.clone(),
                    user_agent,
                    at,
                });
                let file = root.join(path.trim_start_matches('/'));
                let (status, ctype, body) = match std::fs::read(&file) {
                    Ok(b) => ("200 OK", content_type(&file), b),
                    Err(_) => ("404 Not Found", "text/plain", b"not found".to_vec()),
                };
                let head = format!(
                    "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    body.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(&body);
            }
        });
        FixtureServer { base, seen }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base, path.trim_start_matches('/'))
    }
}
