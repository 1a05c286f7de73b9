//! Google Play Data safety records: parsing captured store payloads and the
//! on-disk record format.
//!
//! Two payload shapes are understood. JSON payloads follow the
//! `google-play-scraper` datasafety output (`collectedData`, `sharedData`,
//! `securityPractices`, `privacyPolicyUrl`), or are a previously saved
//! [`DssRecord`]. HTML and plain-text payloads are read line by line from the
//! rendered panel ("Data shared", "Data collected", "Security practices").

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

use crate::fetch::{CapturedPayload, FetchError, PageFetcher};
use crate::taxonomy::{
    parse_purpose_list, resolve_category, resolve_data_type, DataTypeId, PracticeKind, PurposeId,
};

pub const DSS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DssError {
    #[error("fetch failed: {0}")]
    Fetch(#[from] FetchError),
    #[error("no Data safety section in payload from {0}")]
    NoDataSafetySection(String),
    #[error("parse failure at byte {offset}: {message} (near `{context}`)")]
    ParseFailure {
        offset: usize,
        message: String,
        context: String,
    },
    #[error("unresolved data type label `{label}` at byte {offset}")]
    UnresolvedLabel { label: String, offset: usize },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An app under audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppRef {
    pub package_name: String,
    #[serde(default)]
    pub store_category: String,
    #[serde(default)]
    pub installs_floor: u64,
}

impl AppRef {
    pub fn new(package_name: impl Into<String>) -> Self {
        AppRef {
            package_name: package_name.into(),
            store_category: String::new(),
            installs_floor: 0,
        }
    }

    /// Soft validation; unusual but real package names only warn.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !is_package_name(&self.package_name) {
            out.push(format!(
                "package name `{}` is not reverse-DNS shaped",
                self.package_name
            ));
        }
        if !self.store_category.is_empty()
            && !crate::taxonomy::taxonomy()
                .store_categories()
                .iter()
                .any(|c| c == &self.store_category)
        {
            out.push(format!("unknown store category `{}`", self.store_category));
        }
        out
    }
}

/// `segment(.segment)+`, each segment starting with a letter.
pub fn is_package_name(name: &str) -> bool {
    let parts: Vec<&str> = name.split('.').collect();
    parts.len() >= 2
        && parts.iter().all(|p| {
            p.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
                && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityPractice {
    EncryptedInTransit,
    DataDeletionOption,
    IndependentSecurityReview,
}

impl SecurityPractice {
    /// Maps a rendered security-practice label.
    pub fn from_label(label: &str) -> Option<Self> {
        let l = label.to_lowercase();
        if l.contains("encrypted in transit") {
            Some(SecurityPractice::EncryptedInTransit)
        } else if l.contains("deleted") || l.contains("deletion") {
            Some(SecurityPractice::DataDeletionOption)
        } else if l.contains("independent security review") || l.contains("independently validated") {
            Some(SecurityPractice::IndependentSecurityReview)
        } else {
            None
        }
    }
}

impl fmt::Display for SecurityPractice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SecurityPractice::EncryptedInTransit => "encrypted_in_transit",
            SecurityPractice::DataDeletionOption => "data_deletion_option",
            SecurityPractice::IndependentSecurityReview => "independent_security_review",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DssEntry {
    pub data_type: DataTypeId,
    pub practice: PracticeKind,
    pub purposes: BTreeSet<PurposeId>,
    #[serde(default)]
    pub optional: bool,
}

/// The parsed Data safety panel of one app.
///
/// `privacy_policy_url` is `None` when the listing carries no policy link;
/// it serializes as an explicit `null`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DssRecord {
    pub schema_version: u32,
    pub app: AppRef,
    pub collected: Vec<DssEntry>,
    pub shared: Vec<DssEntry>,
    pub security_practices: BTreeSet<SecurityPractice>,
    pub privacy_policy_url: Option<String>,
    pub fetched_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DssRecord {
    pub fn entries(&self, practice: PracticeKind) -> &[DssEntry] {
        match practice {
            PracticeKind::Collection => &self.collected,
            PracticeKind::Sharing => &self.shared,
            PracticeKind::SecurityPractice => &[],
        }
    }

    pub fn declares(&self, practice: PracticeKind, data_type: DataTypeId) -> bool {
        self.entries(practice).iter().any(|e| e.data_type == data_type)
    }

    /// Checks the structural invariants of a record.
    pub fn validate(&self) -> Result<(), DssError> {
        if self.schema_version != DSS_SCHEMA_VERSION {
            return Err(DssError::SchemaViolation(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        if self.app.package_name.is_empty() {
            return Err(DssError::SchemaViolation("empty package_name".into()));
        }
        for (list, practice) in [
            (&self.collected, PracticeKind::Collection),
            (&self.shared, PracticeKind::Sharing),
        ] {
            let mut seen = BTreeSet::new();
            for e in list {
                if e.practice != practice {
                    return Err(DssError::SchemaViolation(format!(
                        "{} entry `{}` listed under {}",
                        e.practice, e.data_type, practice
                    )));
                }
                if !seen.insert(e.data_type) {
                    return Err(DssError::SchemaViolation(format!(
                        "duplicate {} entry `{}`",
                        practice, e.data_type
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), DssError> {
        crate::workspace::write_atomic(path, self.to_json().as_bytes())?;
        Ok(())
    }
}

/// Loads a saved record, validating schema and taxonomy ids.
pub fn load_dss_fixture(path: &Path) -> Result<DssRecord, DssError> {
    let bytes = fs::read(path)?;
    let record: DssRecord =
        serde_json::from_slice(&bytes).map_err(|e| DssError::SchemaViolation(e.to_string()))?;
    record.validate()?;
    Ok(record)
}

/// Store URL of an app's Data safety panel.
pub fn datasafety_url(package_name: &str) -> String {
    format!("https://play.google.com/store/apps/datasafety?id={package_name}&hl=en")
}

/// Fetches, parses and (when `raw_dir` is given) stores the raw payload next
/// to the parsed record. Fields of `app` that are set override payload
/// metadata.
pub fn fetch_dss(
    app: &AppRef,
    fetcher: &dyn PageFetcher,
    raw_dir: Option<&Path>,
) -> Result<DssRecord, DssError> {
    let payload = fetcher.fetch(&datasafety_url(&app.package_name))?;
    if let Some(dir) = raw_dir {
        payload.save(dir, "dss")?;
    }
    let mut record = parse_dss(&payload)?;
    record.app.package_name = app.package_name.clone();
    if !app.store_category.is_empty() {
        record.app.store_category = app.store_category.clone();
    }
    if app.installs_floor > 0 {
        record.app.installs_floor = app.installs_floor;
    }
    for w in app.warnings() {
        warn!(package = %app.package_name, "{w}");
    }
    Ok(record)
}

/// Parses one captured store payload. Pure: the result depends only on the
/// payload bytes, URL and capture time.
pub fn parse_dss(payload: &CapturedPayload) -> Result<DssRecord, DssError> {
    let text = payload.body_text();
    let trimmed = text.trim_start();
    let looks_json = payload.media_type() == "application/json"
        || trimmed.starts_with('{')
        || trimmed.starts_with('[');
    let mut builder = Builder::new(payload);
    if looks_json {
        let value: Value = serde_json::from_str(&text).map_err(|e| json_failure(&text, &e))?;
        if value.get("schema_version").is_some() && value.get("collected").is_some() {
            let record: DssRecord = serde_json::from_value(value)
                .map_err(|e| DssError::SchemaViolation(e.to_string()))?;
            record.validate()?;
            return Ok(record);
        }
        parse_scraper_json(&value, &mut builder)?;
    } else {
        let lines = if payload.media_type().contains("html") || trimmed.starts_with('<') {
            let doc = scraper::Html::parse_document(&text);
            if builder.policy_url.is_none() {
                builder.policy_url = policy_link(&doc);
            }
            crate::html::all_lines(&doc)
                .into_iter()
                .map(|l| (l, 0usize))
                .collect::<Vec<_>>()
        } else {
            let mut offset = 0;
            text.split_inclusive('\n')
                .map(|l| {
                    let at = offset;
                    offset += l.len();
                    (l.trim().to_string(), at)
                })
                .filter(|(l, _)| !l.is_empty())
                .collect()
        };
        parse_panel_lines(&lines, &mut builder)?;
    }
    builder.finish()
}

struct Builder {
    url: String,
    fetched_at: DateTime<Utc>,
    app: AppRef,
    collected: Vec<DssEntry>,
    shared: Vec<DssEntry>,
    security: BTreeSet<SecurityPractice>,
    policy_url: Option<String>,
    warnings: Vec<String>,
}

impl Builder {
    fn new(payload: &CapturedPayload) -> Self {
        let package = query_param(&payload.url, "id").unwrap_or_default();
        Builder {
            url: payload.url.clone(),
            fetched_at: payload.captured_at,
            app: AppRef::new(package),
            collected: Vec::new(),
            shared: Vec::new(),
            security: BTreeSet::new(),
            policy_url: None,
            warnings: Vec::new(),
        }
    }

    fn add(&mut self, entry: DssEntry) {
        let list = match entry.practice {
            PracticeKind::Collection => &mut self.collected,
            _ => &mut self.shared,
        };
        if let Some(existing) = list.iter_mut().find(|e| e.data_type == entry.data_type) {
            let msg = format!(
                "duplicate {} entry `{}` merged",
                entry.practice, entry.data_type
            );
            warn!("{msg}");
            self.warnings.push(msg);
            existing.purposes.extend(entry.purposes);
            existing.optional = existing.optional && entry.optional;
        } else {
            list.push(entry);
        }
    }

    fn finish(self) -> Result<DssRecord, DssError> {
        let record = DssRecord {
            schema_version: DSS_SCHEMA_VERSION,
            app: self.app,
            collected: self.collected,
            shared: self.shared,
            security_practices: self.security,
            privacy_policy_url: self.policy_url,
            fetched_at: self.fetched_at,
            warnings: self.warnings,
        };
        if record.app.package_name.is_empty() {
            return Err(DssError::ParseFailure {
                offset: 0,
                message: "payload does not identify the app".into(),
                context: self.url,
            });
        }
        record.validate()?;
        Ok(record)
    }
}

fn query_param(url: &str, key: &str) -> Option<String> {
    let query = url.split_once('?')?.1;
    let query = query.split('#').next().unwrap_or(query);
    query.split('&').find_map(|kv| {
        let (k, v) = kv.split_once('=')?;
        (k == key && !v.is_empty()).then(|| v.to_string())
    })
}

fn json_failure(text: &str, e: &serde_json::Error) -> DssError {
    let offset = text
        .split_inclusive('\n')
        .take(e.line().saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + e.column().saturating_sub(1);
    let offset = offset.min(text.len());
    let start = text[..offset]
        .char_indices()
        .rev()
        .nth(20)
        .map_or(0, |(i, _)| i);
    DssError::ParseFailure {
        offset,
        message: e.to_string(),
        context: text[start..offset].to_string(),
    }
}

fn parse_scraper_json(value: &Value, b: &mut Builder) -> Result<(), DssError> {
    let obj = value.as_object().ok_or_else(|| DssError::ParseFailure {
        offset: 0,
        message: "expected a JSON object".into(),
        context: String::new(),
    })?;
    let keys = ["collectedData", "sharedData", "securityPractices"];
    if !keys.iter().any(|k| obj.contains_key(*k)) {
        return Err(DssError::NoDataSafetySection(b.url.clone()));
    }
    if let Some(id) = obj.get("appId").and_then(Value::as_str) {
        b.app.package_name = id.to_string();
    }
    if let Some(g) = obj.get("genreId").and_then(Value::as_str) {
        b.app.store_category = g.to_string();
    }
    if let Some(n) = obj.get("minInstalls").and_then(Value::as_u64) {
        b.app.installs_floor = n;
    }
    b.policy_url = obj
        .get("privacyPolicyUrl")
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .map(str::to_string);
    for (key, practice) in [
        ("sharedData", PracticeKind::Sharing),
        ("collectedData", PracticeKind::Collection),
    ] {
        let Some(items) = obj.get(key) else { continue };
        let items = items.as_array().ok_or_else(|| DssError::ParseFailure {
            offset: 0,
            message: format!("`{key}` is not an array"),
            context: key.to_string(),
        })?;
        for (i, item) in items.iter().enumerate() {
            let field = |name: &str| item.get(name).and_then(Value::as_str).unwrap_or("");
            let label = field("data");
            if label.is_empty() {
                return Err(DssError::ParseFailure {
                    offset: 0,
                    message: format!("`{key}[{i}]` has no `data` label"),
                    context: item.to_string(),
                });
            }
            let data_type = resolve_data_type(label, None).ok_or_else(|| DssError::UnresolvedLabel {
                label: label.to_string(),
                offset: 0,
            })?;
            let purposes = parse_purpose_list(field("purpose")).map_err(|bad| DssError::ParseFailure {
                offset: 0,
                message: format!("unknown purpose `{bad}` for `{label}`"),
                context: field("purpose").to_string(),
            })?;
            let optional = item.get("optional").and_then(Value::as_bool).unwrap_or(false);
            b.add(DssEntry {
                data_type,
                practice,
                purposes: purposes.into_iter().collect(),
                optional,
            });
        }
    }
    if let Some(items) = obj.get("securityPractices").and_then(Value::as_array) {
        for item in items {
            let label = item
                .get("practice")
                .and_then(Value::as_str)
                .or_else(|| item.as_str())
                .unwrap_or("");
            match SecurityPractice::from_label(label) {
                Some(p) => {
                    b.security.insert(p);
                }
                None => b.warnings.push(format!("ignored security practice `{label}`")),
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Practice(PracticeKind),
    Security,
    Other,
}

fn section_header(line: &str) -> Option<(Section, &str)> {
    let lower = line.to_lowercase();
    let (section, head_len) = if lower.starts_with("data shared") {
        (Section::Practice(PracticeKind::Sharing), "data shared".len())
    } else if lower.starts_with("data collected") {
        (Section::Practice(PracticeKind::Collection), "data collected".len())
    } else if lower.starts_with("no data shared") || lower.starts_with("no data collected") {
        (Section::Other, line.len())
    } else if lower.starts_with("security practices") {
        (Section::Security, "security practices".len())
    } else {
        return None;
    };
    let rest = line[head_len..].trim_start();
    let rest = rest.strip_prefix(':').map(str::trim).unwrap_or("");
    Some((section, rest))
}

const SEPARATORS: &[&str] = &[" \u{2014} ", " \u{2013} ", " - ", " \u{00B7} ", " | ", ": "];

fn split_entry(line: &str) -> Option<(&str, &str)> {
    SEPARATORS
        .iter()
        .filter_map(|sep| line.find(sep).map(|i| (i, sep.len())))
        .min_by_key(|(i, _)| *i)
        .map(|(i, n)| (line[..i].trim(), line[i + n..].trim()))
}

fn strip_optional(text: &str) -> (&str, bool) {
    let t = text.trim();
    for marker in ["(optional)", "\u{00B7} Optional", "Optional"] {
        if let Some(s) = t.strip_suffix(marker) {
            if marker != "Optional" || s.ends_with(' ') {
                return (s.trim().trim_end_matches([',', '\u{00B7}']).trim(), true);
            }
        }
    }
    (t, false)
}

fn entry_from(
    label: &str,
    purposes_text: &str,
    practice: PracticeKind,
    offset: usize,
) -> Result<DssEntry, DssError> {
    let (label, opt_a) = strip_optional(label);
    let (purposes_text, opt_b) = strip_optional(purposes_text);
    let data_type = resolve_data_type(label, None).ok_or_else(|| DssError::UnresolvedLabel {
        label: label.to_string(),
        offset,
    })?;
    let purposes = parse_purpose_list(purposes_text).map_err(|bad| DssError::ParseFailure {
        offset,
        message: format!("unknown purpose `{bad}` for `{label}`"),
        context: purposes_text.to_string(),
    })?;
    if purposes.is_empty() {
        return Err(DssError::ParseFailure {
            offset,
            message: format!("no purposes declared for `{label}`"),
            context: label.to_string(),
        });
    }
    Ok(DssEntry {
        data_type,
        practice,
        purposes: purposes.into_iter().collect(),
        optional: opt_a || opt_b,
    })
}

fn is_purpose_line(line: &str) -> bool {
    let (t, _) = strip_optional(line);
    parse_purpose_list(t).is_ok_and(|p| !p.is_empty())
}

/// Rendered panel text. A data-type line is either `Type - Purposes` (any
/// separator above) or a bare type followed by a purposes line; bare
/// category names are headings.
fn parse_panel_lines(lines: &[(String, usize)], b: &mut Builder) -> Result<(), DssError> {
    let mut section = Section::None;
    let mut saw_section = false;
    let mut i = 0;
    while i < lines.len() {
        let (line, offset) = (&lines[i].0, lines[i].1);
        i += 1;
        if let Some((s, rest)) = section_header(line) {
            section = s;
            saw_section = true;
            if let (Section::Practice(p), false) = (s, rest.is_empty()) {
                let (label, purposes) = split_entry(rest).ok_or_else(|| DssError::ParseFailure {
                    offset,
                    message: "inline entry lacks a purpose".into(),
                    context: rest.to_string(),
                })?;
                b.add(entry_from(label, purposes, p, offset)?);
            }
            continue;
        }
        if b.policy_url.is_none() && line.to_lowercase().contains("privacy policy") {
            if let Some(url) = line.split_whitespace().find(|w| w.starts_with("http")) {
                b.policy_url = Some(url.to_string());
            }
        }
        match section {
            Section::Practice(p) => {
                if let Some((label, purposes)) = split_entry(line) {
                    if resolve_data_type(strip_optional(label).0, None).is_some()
                        || is_purpose_line(purposes)
                    {
                        b.add(entry_from(label, purposes, p, offset)?);
                        continue;
                    }
                }
                let (label, _) = strip_optional(line);
                let next_is_purposes = lines.get(i).is_some_and(|(n, _)| is_purpose_line(n));
                if next_is_purposes {
                    if resolve_data_type(label, None).is_none() {
                        return Err(DssError::UnresolvedLabel {
                            label: label.to_string(),
                            offset,
                        });
                    }
                    let (next, _) = &lines[i];
                    i += 1;
                    b.add(entry_from(line, next, p, offset)?);
                } else if resolve_category(label).is_none() && resolve_data_type(label, None).is_some() {
                    return Err(DssError::ParseFailure {
                        offset,
                        message: format!("no purposes declared for `{label}`"),
                        context: line.clone(),
                    });
                }
                // anything else is a heading or explanatory prose
            }
            Section::Security => {
                if let Some(p) = SecurityPractice::from_label(line) {
                    b.security.insert(p);
                }
            }
            Section::None | Section::Other => {}
        }
    }
    if !saw_section {
        return Err(DssError::NoDataSafetySection(b.url.clone()));
    }
    Ok(())
}

fn policy_link(doc: &scraper::Html) -> Option<String> {
    let sel = scraper::Selector::parse("a[href]").expect("static selector");
    doc.select(&sel).find_map(|a| {
        let text: String = a.text().collect::<String>().to_lowercase();
        let href = a.value().attr("href")?;
        (text.contains("privacy policy") && href.starts_with("http")).then(|| href.to_string())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{DataTypeId, PurposeId};

    fn payload(ct: &str, body: &str) -> CapturedPayload {
        CapturedPayload::new(datasafety_url("com.example.app"), ct, body.as_bytes().to_vec())
    }

    fn dt(k: &str) -> DataTypeId {
        DataTypeId::from_key(k).unwrap()
    }

    fn pu(k: &str) -> PurposeId {
        PurposeId::from_key(k).unwrap()
    }

    #[test]
    fn scraper_json() {
        let body = r#"{
          "sharedData": [],
          "collectedData": [
            {"data": "Email address", "optional": false, "purpose": "Account management", "type": "Personal info"}
          ],
          "securityPractices": [{"practice": "Data is encrypted in transit", "description": ""}],
          "privacyPolicyUrl": "https://example.com/privacy"
        }"#;
        let r = parse_dss(&payload("application/json", body)).unwrap();
        assert_eq!(r.app.package_name, "com.example.app");
        assert!(r.shared.is_empty());
        assert_eq!(r.collected.len(), 1);
        assert_eq!(r.collected[0].data_type, dt("email_address"));
        assert_eq!(r.collected[0].purposes, BTreeSet::from([pu("account_management")]));
        assert_eq!(r.security_practices, BTreeSet::from([SecurityPractice::EncryptedInTransit]));
        assert_eq!(r.privacy_policy_url.as_deref(), Some("https://example.com/privacy"));
    }

    #[test]
    fn inline_text_entry() {
        let r = parse_dss(&payload(
            "text/plain",
            "Data shared: Approximate location \u{2014} Advertising\n",
        ))
        .unwrap();
        assert_eq!(r.shared.len(), 1);
        assert_eq!(r.shared[0].data_type, dt("approximate_location"));
        assert_eq!(r.shared[0].purposes, BTreeSet::from([pu("advertising_or_marketing")]));
    }

    #[test]
    fn panel_lines_with_headings() {
        let body = "Data safety\nData collected\nData this app may collect\nLocation\nApproximate location\nApp functionality, Fraud prevention, security, and compliance\nPersonal info\nName \u{2014} Account management (optional)\nSecurity practices\nYou can request that data be deleted\n";
        let r = parse_dss(&payload("text/plain", body)).unwrap();
        assert_eq!(r.collected.len(), 2);
        assert_eq!(r.collected[0].purposes.len(), 2);
        assert!(r.collected[1].optional);
        assert_eq!(r.security_practices, BTreeSet::from([SecurityPractice::DataDeletionOption]));
    }

    #[test]
    fn duplicates_merge_purposes() {
        let body = "Data collected\nName \u{2014} Analytics\nName \u{2014} Account management\n";
        let r = parse_dss(&payload("text/plain", body)).unwrap();
        assert_eq!(r.collected.len(), 1);
        assert_eq!(r.collected[0].purposes.len(), 2);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn failures() {
        assert!(matches!(
            parse_dss(&payload("application/json", r#"{"title": "Some app"}"#)),
            Err(DssError::NoDataSafetySection(_))
        ));
        assert!(matches!(
            parse_dss(&payload("text/html", "<html><body><h1>Some app</h1></body></html>")),
            Err(DssError::NoDataSafetySection(_))
        ));
        match parse_dss(&payload("application/json", r#"{"collectedData": [{"data": "Em"#)) {
            Err(DssError::ParseFailure { offset, .. }) => assert!(offset > 0),
            other => panic!("{other:?}"),
        }
        match parse_dss(&payload("text/plain", "Data shared\nTelepathic signals \u{2014} Analytics\n")) {
            Err(DssError::UnresolvedLabel { label, .. }) => assert_eq!(label, "Telepathic signals"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn record_round_trip() {
        let r = parse_dss(&payload(
            "text/plain",
            "Data shared: Approximate location \u{2014} Advertising\n",
        ))
        .unwrap();
        let again = parse_dss(&payload("application/json", &r.to_json())).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn package_names() {
        assert!(is_package_name("com.example.app"));
        assert!(is_package_name("org.a1_b.C"));
        assert!(!is_package_name("example"));
        assert!(!is_package_name("com..x"));
        assert!(!is_package_name("1com.x"));
    }
}
