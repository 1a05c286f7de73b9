//! Privacy policy retrieval: consent-banner removal, text extraction,
//! language detection and PDF rendition.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use chrono::{DateTime, Utc};
use ego_tree::NodeId;
use lopdf::content::{Content, Operation};
use lopdf::{dictionary, Document, Object, Stream};
use scraper::{ElementRef, Html, Selector};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::fetch::{CapturedPayload, FetchError, PageFetcher};
use crate::text::normalize_whitespace;
use crate::workspace::{write_atomic, AppWorkspace};

pub const POLICY_SCHEMA_VERSION: u32 = 1;

/// Extracted text shorter than this is flagged as possibly not a policy
/// (e.g. a redirect to a generic home page).
pub const LOW_CONTENT_CHARS: usize = 500;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("fetch failed: {0}")]
    Fetch(#[from] FetchError),
    #[error("invalid policy URL `{0}`")]
    InvalidUrl(String),
    #[error("no extractable text in {0}")]
    EmptyContent(String),
    #[error("PDF rendition requested but no renderer is configured")]
    RenderUnavailable,
    #[error("renderer failed: {0}")]
    RenderFailure(String),
    #[error("unreadable PDF: {0}")]
    Pdf(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentKind {
    Html,
    Pdf,
    PlainText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsentRuleKind {
    CssSelector,
    ButtonTextKeyword,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRule {
    pub kind: ConsentRuleKind,
    pub pattern: String,
}

impl ConsentRule {
    pub fn button(text: &str) -> Self {
        ConsentRule {
            kind: ConsentRuleKind::ButtonTextKeyword,
            pattern: text.to_string(),
        }
    }

    pub fn selector(sel: &str) -> Self {
        ConsentRule {
            kind: ConsentRuleKind::CssSelector,
            pattern: sel.to_string(),
        }
    }

    /// Seed list: the three common button labels, then widely deployed
    /// consent-manager containers.
    pub fn default_rules() -> Vec<ConsentRule> {
        vec![
            ConsentRule::button("ACCEPT"),
            ConsentRule::button("AGREE"),
            ConsentRule::button("REJECT"),
            ConsentRule::selector("#onetrust-banner-sdk"),
            ConsentRule::selector("#onetrust-consent-sdk"),
            ConsentRule::selector("#CybotCookiebotDialog"),
            ConsentRule::selector("#didomi-host"),
            ConsentRule::selector("#usercentrics-root"),
            ConsentRule::selector(".cc-window"),
            ConsentRule::selector("[aria-label*=cookie i]"),
        ]
    }
}

fn default_settle_wait() -> Duration {
    Duration::from_secs(3)
}

fn default_rate_limit() -> Duration {
    Duration::from_millis(500)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FetchConfig {
    pub user_agent: String,
    #[serde(with = "duration_ms", rename = "settle_wait_ms")]
    pub settle_wait: Duration,
    #[serde(with = "duration_ms", rename = "rate_limit_interval_ms")]
    pub rate_limit_interval: Duration,
    #[serde(with = "duration_ms", rename = "timeout_ms")]
    pub timeout: Duration,
    pub consent_rules: Vec<ConsentRule>,
    /// Command for the external renderer (`<cmd> <url> <out> <mode>`).
    pub renderer_command: Option<String>,
}

impl Default for FetchConfig {
    fn default() -> Self {
        FetchConfig {
            user_agent: crate::fetch::HttpFetcher::DEFAULT_USER_AGENT.to_string(),
            settle_wait: default_settle_wait(),
            rate_limit_interval: default_rate_limit(),
            timeout: Duration::from_secs(30),
            consent_rules: ConsentRule::default_rules(),
            renderer_command: None,
        }
    }
}

impl FetchConfig {
    /// One request every 357 seconds.
    pub fn polite() -> Self {
        FetchConfig {
            rate_limit_interval: crate::fetch::RateLimiter::POLITE_INTERVAL,
            ..FetchConfig::default()
        }
    }
}

pub(crate) mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// A retrieved and cleaned policy. Paths are relative to the app workspace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub schema_version: u32,
    pub url: String,
    pub package_name: String,
    pub content_kind: ContentKind,
    pub raw_ref: String,
    pub extracted_text: String,
    pub pdf_ref: Option<String>,
    pub lang: String,
    pub fetched_at: DateTime<Utc>,
    pub banner_cleared: bool,
    pub banner_residual: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl PolicyDocument {
    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| {
            PolicyError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("document serializes");
        s.push('\n');
        s
    }
}

/// Produces a page-faithful PDF of a policy.
pub trait Renderer: Send + Sync {
    /// `html` is the cleaned page; `url` its origin.
    fn render_pdf(&self, html: &str, url: &str, cfg: &FetchConfig) -> Result<Vec<u8>, PolicyError>;
}

/// Subprocess renderer: `<cmd> <url> <out-path> pdf`, with `SETTLE_WAIT_MS`
/// and `USER_AGENT` in the environment. Exit status 0 means the output file
/// holds the rendition. The page passed in is the cleaned HTML, written to
/// a temporary `file://` URL.
#[derive(Debug, Clone)]
pub struct ExternalRenderer {
    pub command: String,
}

impl Renderer for ExternalRenderer {
    fn render_pdf(&self, html: &str, _url: &str, cfg: &FetchConfig) -> Result<Vec<u8>, PolicyError> {
        let dir = tempfile::tempdir()?;
        let page = dir.path().join("page.html");
        let out = dir.path().join("page.pdf");
        std::fs::write(&page, html)?;
        let status = Command::new(&self.command)
            .arg(format!("file://{}", page.display()))
            .arg(&out)
            .arg("pdf")
            .env("SETTLE_WAIT_MS", cfg.settle_wait.as_millis().to_string())
            .env("USER_AGENT", &cfg.user_agent)
            .status()
            .map_err(|e| PolicyError::RenderFailure(format!("{}: {e}", self.command)))?;
        if !status.success() {
            return Err(PolicyError::RenderFailure(format!("{} exited with {status}", self.command)));
        }
        let bytes = std::fs::read(&out)
            .map_err(|e| PolicyError::RenderFailure(format!("no output: {e}")))?;
        if !bytes.starts_with(b"%PDF-") {
            return Err(PolicyError::RenderFailure("output is not a PDF".into()));
        }
        Ok(bytes)
    }
}

/// Built-in renderer that lays out the extracted text as a plain text-layer
/// PDF. Keeps reading order; does not reproduce styling or tables.
#[derive(Debug, Clone, Copy, Default)]
pub struct TextPdfRenderer;

impl Renderer for TextPdfRenderer {
    fn render_pdf(&self, html: &str, _url: &str, _cfg: &FetchConfig) -> Result<Vec<u8>, PolicyError> {
        let doc = Html::parse_document(html);
        let lines = crate::html::main_content_lines(&doc);
        text_pdf(&lines)
    }
}

const PDF_WRAP: usize = 95;
const PDF_LINES_PER_PAGE: usize = 60;

fn wrap(line: &str, width: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for w in line.split_whitespace() {
        if !cur.is_empty() && cur.chars().count() + 1 + w.chars().count() > width {
            out.push(std::mem::take(&mut cur));
        }
        if !cur.is_empty() {
            cur.push(' ');
        }
        cur.push_str(w);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn win_ansi(s: &str) -> Vec<u8> {
    s.chars()
        .map(|c| match c {
            '\u{2018}' | '\u{2019}' => b'\'',
            '\u{201C}' | '\u{201D}' => b'"',
            '\u{2013}' | '\u{2014}' => b'-',
            c if (c as u32) < 0x80 => c as u8,
            c if (0xA0..=0xFF).contains(&(c as u32)) => c as u32 as u8,
            _ => b'?',
        })
        .collect()
}

/// Builds a text-layer PDF with one text line per input line (wrapped).
pub fn text_pdf(lines: &[String]) -> Result<Vec<u8>, PolicyError> {
    let wrapped: Vec<String> = lines.iter().flat_map(|l| wrap(l, PDF_WRAP)).collect();
    let mut doc = Document::with_version("1.5");
    let pages_id = doc.new_object_id();
    let font_id = doc.add_object(dictionary! {
        "Type" => "Font",
        "Subtype" => "Type1",
        "BaseFont" => "Helvetica",
        "Encoding" => "WinAnsiEncoding",
    });
    let resources_id = doc.add_object(dictionary! {
        "Font" => dictionary! { "F1" => font_id },
    });
    let mut kids: Vec<Object> = Vec::new();
    let chunks: Vec<&[String]> = if wrapped.is_empty() {
        vec![&[]]
    } else {
        wrapped.chunks(PDF_LINES_PER_PAGE).collect()
    };
    for chunk in chunks {
        let mut ops = vec![
            Operation::new("BT", vec![]),
            Operation::new("Tf", vec!["F1".into(), 10.into()]),
            Operation::new("TL", vec![12.into()]),
            Operation::new("Td", vec![40.into(), 800.into()]),
        ];
        for line in chunk {
            ops.push(Operation::new("Tj", vec![Object::string_literal(win_ansi(line))]));
            ops.push(Operation::new("T*", vec![]));
        }
        ops.push(Operation::new("ET", vec![]));
        let content = Content { operations: ops };
        let encoded = content
            .encode()
            .map_err(|e| PolicyError::RenderFailure(e.to_string()))?;
        let content_id = doc.add_object(Stream::new(dictionary! {}, encoded));
        let page_id = doc.add_object(dictionary! {
            "Type" => "Page",
            "Parent" => pages_id,
            "Contents" => content_id,
        });
        kids.push(page_id.into());
    }
    let count = kids.len() as i64;
    doc.objects.insert(
        pages_id,
        Object::Dictionary(dictionary! {
            "Type" => "Pages",
            "Kids" => kids,
            "Count" => count,
            "Resources" => resources_id,
            "MediaBox" => vec![0.into(), 0.into(), 595.into(), 842.into()],
        }),
    );
    let catalog_id = doc.add_object(dictionary! {
        "Type" => "Catalog",
        "Pages" => pages_id,
    });
    doc.trailer.set("Root", catalog_id);
    let mut out = Vec::new();
    doc.save_to(&mut out)
        .map_err(|e| PolicyError::RenderFailure(e.to_string()))?;
    Ok(out)
}

/// Outcome of consent-banner removal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsentOutcome {
    pub cleared: bool,
    pub residual: bool,
    pub removed: usize,
}

const CONSENT_MARKERS: &[&str] = &[
    "cookie", "cookies", "consent", "gdpr", "cmp", "onetrust", "cookiebot", "didomi",
    "usercentrics", "cc-window", "cookie-banner", "cookie-notice",
];

/// Elements that hold page content and are never treated as overlays.
const CONTENT_ROOTS: &[&str] = &["html", "body", "main", "article"];

fn is_overlay(el: &ElementRef<'_>) -> bool {
    let v = el.value();
    if CONTENT_ROOTS.contains(&v.name()) {
        return false;
    }
    let style: String = v
        .attr("style")
        .unwrap_or("")
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect();
    if style.contains("position:fixed") {
        return true;
    }
    if v.attr("role") == Some("dialog") && v.attr("aria-modal") == Some("true") {
        return true;
    }
    if v.name() == "dialog" && v.attr("open").is_some() {
        return true;
    }
    let names = v.id().into_iter().chain(v.classes());
    for name in names {
        let lower = name.to_lowercase();
        if CONSENT_MARKERS.contains(&lower.as_str())
            || lower
                .split(['-', '_'])
                .any(|tok| CONSENT_MARKERS.contains(&tok))
        {
            return true;
        }
    }
    false
}

fn button_matches(el: &ElementRef<'_>, keyword: &str) -> bool {
    let v = el.value();
    let clickable = matches!(v.name(), "button" | "a")
        || v.attr("role") == Some("button")
        || (v.name() == "input" && matches!(v.attr("type"), Some("button" | "submit")));
    if !clickable {
        return false;
    }
    let label = if v.name() == "input" {
        v.attr("value").unwrap_or("").to_string()
    } else {
        el.text().collect::<String>()
    };
    let label = label.to_lowercase();
    let keyword = keyword.to_lowercase();
    label
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| w == keyword)
}

/// Outermost overlay-shaped element containing `el` (inclusive).
fn overlay_container(el: ElementRef<'_>) -> Option<NodeId> {
    let mut found = is_overlay(&el).then(|| el.id());
    for anc in el.ancestors().filter_map(ElementRef::wrap) {
        if is_overlay(&anc) {
            found = Some(anc.id());
        }
    }
    found
}

fn overlay_count(doc: &Html) -> usize {
    let all = Selector::parse("*").expect("static selector");
    doc.select(&all).filter(is_overlay).count()
}

/// Applies consent rules in order until no overlay-shaped element remains.
/// Only overlay containers that hold a matched element are removed.
pub fn dismiss_consent(doc: &mut Html, rules: &[ConsentRule]) -> ConsentOutcome {
    let mut removed = 0;
    let all = Selector::parse("*").expect("static selector");
    for rule in rules {
        if overlay_count(doc) == 0 {
            break;
        }
        let targets: Vec<NodeId> = match rule.kind {
            ConsentRuleKind::ButtonTextKeyword => doc
                .select(&all)
                .filter(|el| button_matches(el, &rule.pattern))
                .filter_map(overlay_container)
                .collect(),
            ConsentRuleKind::CssSelector => match Selector::parse(&rule.pattern) {
                Ok(sel) => doc.select(&sel).filter_map(overlay_container).collect(),
                Err(_) => {
                    warn!(pattern = %rule.pattern, "invalid consent selector skipped");
                    Vec::new()
                }
            },
        };
        for id in targets {
            if let Some(mut node) = doc.tree.get_mut(id) {
                // an earlier target may already have detached an ancestor
                if node.parent().is_some() {
                    node.detach();
                    removed += 1;
                }
            }
        }
    }
    let residual = overlay_count(doc) > 0;
    ConsentOutcome {
        cleared: !residual,
        residual,
        removed,
    }
}

/// Text of an HTML page's main content, one block per line.
pub fn extract_html_text(html: &str, rules: &[ConsentRule]) -> (String, ConsentOutcome, Html) {
    let mut doc = Html::parse_document(html);
    let outcome = dismiss_consent(&mut doc, rules);
    let text = crate::html::main_content_lines(&doc).join("\n");
    (text, outcome, doc)
}

/// Text layer of a PDF, pages concatenated in order.
pub fn extract_pdf_text(bytes: &[u8]) -> Result<String, PolicyError> {
    let doc = Document::load_mem(bytes).map_err(|e| PolicyError::Pdf(e.to_string()))?;
    let mut lines = Vec::new();
    for page in doc.get_pages().keys() {
        let text = doc.extract_text(&[*page]).unwrap_or_default();
        lines.extend(
            text.lines()
                .map(normalize_whitespace)
                .filter(|l| !l.is_empty()),
        );
    }
    Ok(lines.join("\n"))
}

/// Boilerplate-stripped, whitespace-normalized text of a payload.
pub fn extract_text(payload: &CapturedPayload, kind: ContentKind) -> Result<String, PolicyError> {
    let text = match kind {
        ContentKind::Pdf => extract_pdf_text(&payload.body)?,
        ContentKind::Html => extract_html_text(&payload.body_text(), &[]).0,
        ContentKind::PlainText => plain_lines(&payload.body_text()),
    };
    if text.trim().is_empty() {
        return Err(PolicyError::EmptyContent(payload.url.clone()));
    }
    Ok(text)
}

fn plain_lines(text: &str) -> String {
    text.lines()
        .map(normalize_whitespace)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn content_kind(payload: &CapturedPayload) -> ContentKind {
    if payload.is_pdf() {
        return ContentKind::Pdf;
    }
    let mt = payload.media_type();
    if mt.contains("html") || payload.body_text().trim_start().starts_with('<') {
        ContentKind::Html
    } else {
        ContentKind::PlainText
    }
}

/// ISO 639-1 code where one exists, else the detector's 639-3 code;
/// `und` when nothing can be detected.
pub fn detect_language(text: &str) -> String {
    let sample: String = normalize_whitespace(text).chars().take(20_000).collect();
    let Some(info) = whatlang::detect(&sample) else {
        return "und".to_string();
    };
    let code = info.lang().code();
    let two = match code {
        "eng" => "en",
        "spa" => "es",
        "fra" => "fr",
        "deu" => "de",
        "ita" => "it",
        "por" => "pt",
        "nld" => "nl",
        "rus" => "ru",
        "ukr" => "uk",
        "pol" => "pl",
        "ces" => "cs",
        "swe" => "sv",
        "dan" => "da",
        "nob" => "nb",
        "fin" => "fi",
        "tur" => "tr",
        "ell" => "el",
        "ron" => "ro",
        "hun" => "hu",
        "jpn" => "ja",
        "kor" => "ko",
        "cmn" => "zh",
        "ara" => "ar",
        "heb" => "he",
        "hin" => "hi",
        "ind" => "id",
        "vie" => "vi",
        "tha" => "th",
        other => other,
    };
    two.to_string()
}

/// PDF rendition of a payload. PDFs pass through unchanged.
pub fn render_policy_pdf(
    payload: &CapturedPayload,
    renderer: Option<&dyn Renderer>,
    cfg: &FetchConfig,
) -> Result<Vec<u8>, PolicyError> {
    if payload.is_pdf() {
        return Ok(payload.body.clone());
    }
    let renderer = renderer.ok_or(PolicyError::RenderUnavailable)?;
    let html = match content_kind(payload) {
        ContentKind::Html => {
            let (_, _, doc) = extract_html_text(&payload.body_text(), &cfg.consent_rules);
            doc.html()
        }
        _ => {
            let mut page = String::from("<html><body>");
            for line in payload.body_text().lines() {
                page.push_str("<p>");
                page.push_str(&escape_html(line));
                page.push_str("</p>");
            }
            page.push_str("</body></html>");
            page
        }
    };
    renderer.render_pdf(&html, &payload.url, cfg)
}

fn escape_html(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Builds the document from a captured payload without touching disk.
/// Returns the document and, for non-PDF payloads with a renderer, the
/// rendition bytes.
pub fn build_policy_document(
    payload: &CapturedPayload,
    package_name: &str,
    cfg: &FetchConfig,
    renderer: Option<&dyn Renderer>,
    require_pdf: bool,
) -> Result<(PolicyDocument, Option<Vec<u8>>), PolicyError> {
    let kind = content_kind(payload);
    let mut warnings = Vec::new();
    let (text, outcome) = match kind {
        ContentKind::Html => {
            let (text, outcome, _) = extract_html_text(&payload.body_text(), &cfg.consent_rules);
            (text, outcome)
        }
        ContentKind::Pdf => (
            extract_pdf_text(&payload.body)?,
            ConsentOutcome {
                cleared: true,
                residual: false,
                removed: 0,
            },
        ),
        ContentKind::PlainText => (
            plain_lines(&payload.body_text()),
            ConsentOutcome {
                cleared: true,
                residual: false,
                removed: 0,
            },
        ),
    };
    if text.trim().is_empty() {
        return Err(PolicyError::EmptyContent(payload.url.clone()));
    }
    if outcome.residual {
        let msg = "consent overlay still present after applying all rules".to_string();
        warn!(url = %payload.url, "{msg}");
        warnings.push(msg);
    }
    if text.chars().count() < LOW_CONTENT_CHARS {
        let msg = format!("low content: {} characters extracted", text.chars().count());
        warn!(url = %payload.url, "{msg}");
        warnings.push(msg);
    }
    let raw_ref = format!("raw/policy.{}", payload.extension());
    let (pdf_ref, pdf) = match kind {
        ContentKind::Pdf => (Some(raw_ref.clone()), None),
        _ => match renderer {
            Some(_) => (
                Some("policy.pdf".to_string()),
                Some(render_policy_pdf(payload, renderer, cfg)?),
            ),
            None if require_pdf => return Err(PolicyError::RenderUnavailable),
            None => (None, None),
        },
    };
    let doc = PolicyDocument {
        schema_version: POLICY_SCHEMA_VERSION,
        url: payload.url.clone(),
        package_name: package_name.to_string(),
        content_kind: kind,
        raw_ref,
        lang: detect_language(&text),
        extracted_text: text,
        pdf_ref,
        fetched_at: payload.captured_at,
        banner_cleared: outcome.cleared,
        banner_residual: outcome.residual,
        warnings,
    };
    Ok((doc, pdf))
}

pub fn validate_url(url: &str) -> Result<(), PolicyError> {
    let ok = ["http://", "https://"]
        .iter()
        .any(|p| url.len() > p.len() && url.starts_with(p))
        && !url.contains(char::is_whitespace);
    if ok {
        Ok(())
    } else {
        Err(PolicyError::InvalidUrl(url.to_string()))
    }
}

/// Fetches a policy and writes `raw/policy.*`, `policy.txt`,
/// `policy.pdf` (when rendered) and `policy.json` into the workspace.
pub fn fetch_policy(
    url: &str,
    package_name: &str,
    cfg: &FetchConfig,
    fetcher: &dyn PageFetcher,
    renderer: Option<&dyn Renderer>,
    require_pdf: bool,
    ws: &AppWorkspace,
) -> Result<PolicyDocument, PolicyError> {
    validate_url(url)?;
    let payload = fetcher.fetch(url)?;
    payload.save(&ws.raw_dir(), "policy")?;
    let (doc, pdf) = build_policy_document(&payload, package_name, cfg, renderer, require_pdf)?;
    write_atomic(&ws.policy_text_path(), doc.extracted_text.as_bytes())?;
    if let Some(bytes) = pdf {
        write_atomic(&ws.policy_pdf_path(), &bytes)?;
    }
    write_atomic(&ws.policy_meta_path(), doc.to_json().as_bytes())?;
    Ok(doc)
}

/// Resolves a document's PDF reference inside its workspace.
pub fn pdf_path(doc: &PolicyDocument, ws: &AppWorkspace) -> Option<PathBuf> {
    doc.pdf_ref.as_ref().map(|r| ws.root().join(r))
}

impl fmt::Display for ContentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContentKind::Html => "html",
            ContentKind::Pdf => "pdf",
            ContentKind::PlainText => "plain_text",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const POLICY: &str = "<html><body><nav>Home</nav><main><h1>Privacy Policy</h1>\
        <p>We collect your email address when you register.</p>\
        <p>We share approximate location with advertising partners.</p></main>\
        <footer>Contact</footer>";

    fn with_banner(inner: &str) -> String {
        format!(
            "{POLICY}<div id=\"cookie-banner\" style=\"position: fixed; bottom:0\">\
             <p>This site uses cookies to improve your experience.</p>{inner}</div></body></html>"
        )
    }

    #[test]
    fn accept_banner_removed() {
        let html = with_banner("<button>ACCEPT</button>");
        let (text, out, _) = extract_html_text(&html, &ConsentRule::default_rules());
        assert!(out.cleared && !out.residual);
        assert!(!text.contains("cookies"));
        assert!(text.contains("email address"));
    }

    #[test]
    fn unmatched_banner_is_residual() {
        let html = with_banner("<button>Akzeptieren</button>");
        let mut doc = Html::parse_document(&html);
        let out = dismiss_consent(&mut doc, &[ConsentRule::button("ACCEPT")]);
        assert!(out.residual && !out.cleared);
        assert_eq!(out.removed, 0);
    }

    #[test]
    fn no_banner_is_vacuously_cleared() {
        let mut doc = Html::parse_document(POLICY);
        let before = doc.html();
        let out = dismiss_consent(&mut doc, &ConsentRule::default_rules());
        assert!(out.cleared && !out.residual);
        assert_eq!(doc.html(), before);
    }

    #[test]
    fn matched_button_outside_overlay_is_left_alone() {
        let html = "<body><main><p>Do you agree?</p><button>AGREE</button></main></body>";
        let mut doc = Html::parse_document(html);
        let before = doc.html();
        let out = dismiss_consent(&mut doc, &ConsentRule::default_rules());
        assert_eq!(out.removed, 0);
        assert_eq!(doc.html(), before);
    }

    #[test]
    fn text_pdf_round_trip() {
        let lines = vec![
            "Privacy Policy".to_string(),
            "We collect your email address when you register, and we keep it for as long as your account exists on our service.".to_string(),
        ];
        let pdf = text_pdf(&lines).unwrap();
        let text = extract_pdf_text(&pdf).unwrap();
        assert_eq!(normalize_whitespace(&text), normalize_whitespace(&lines.join(" ")));
    }

    #[test]
    fn language() {
        assert_eq!(
            detect_language("We collect your email address when you register for an account and use it to send you updates about the service."),
            "en"
        );
        assert_eq!(
            detect_language("Recopilamos su dirección de correo electrónico cuando se registra y la utilizamos para enviarle información sobre el servicio."),
            "es"
        );
    }

    #[test]
    fn render_requires_renderer() {
        let p = CapturedPayload::new("https://x.org/pp", "text/html", POLICY.as_bytes().to_vec());
        assert!(matches!(
            render_policy_pdf(&p, None, &FetchConfig::default()),
            Err(PolicyError::RenderUnavailable)
        ));
        let pdf = CapturedPayload::new("https://x.org/pp.pdf", "application/pdf", text_pdf(&["x".into()]).unwrap());
        assert_eq!(render_policy_pdf(&pdf, None, &FetchConfig::default()).unwrap(), pdf.body);
    }
}
