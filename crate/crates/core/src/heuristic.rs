//! Offline providers.
//!
//! [`HeuristicProvider`] answers the three pipeline prompts with keyword
//! rules, so the whole pipeline can run (and record transcripts) without a
//! network model. [`ScriptedProvider`] returns canned replies by tag.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::{json, Value};

use crate::constraints::ConstraintEngine;
use crate::llm::{ChatProvider, ChatRequest, ChatResponse, FinishReason, ProviderError, Usage};
use crate::pipeline::{extract_json_object, DSS_JSON_NAME, POLICY_PDF_NAME, SUMMARY_TXT_NAME};
use crate::policy::extract_pdf_text;
use crate::taxonomy::{data_type_terms, resolve_category, resolve_data_type, DataTypeId, PracticeKind};
use crate::text::{estimate_tokens, normalize_for_match, normalize_whitespace};

const COLLECTION_WORDS: &[&str] = &[
    "collect", "gather", "obtain", "receive", "record", "store", "access", "log", "process",
    "provide us", "you give us", "automatically",
];
const SHARING_WORDS: &[&str] = &[
    "share", "disclose", "transfer", "sell", "third part", "partners", "affiliates", "advertis",
    "provide it to", "made available to",
];

/// Extra phrases per data type display name, beyond the taxonomy synonyms.
const EXTRA_TERMS: &[(&str, &[&str])] = &[
    ("Approximate location", &["approximate location", "ip-based location", "general location", "city-level location"]),
    ("Precise location", &["precise location", "gps", "exact location", "geolocation"]),
    ("Name", &["your name", "full name", "first name", "last name"]),
    ("Email address", &["email address", "e-mail address"]),
    ("User IDs", &["account id", "username", "user name", "user id"]),
    ("Address", &["postal address", "mailing address", "home address", "billing address"]),
    ("Phone number", &["phone number", "telephone number", "mobile number"]),
    ("Race and ethnicity", &["racial", "ethnic origin", "ethnicity"]),
    ("Political or religious beliefs", &["political opinions", "religious beliefs", "political views"]),
    ("Sexual orientation", &["sexual orientation"]),
    ("User payment info", &["credit card", "card number", "payment information", "bank account"]),
    ("Purchase history", &["purchase history", "purchases", "transaction history"]),
    ("Credit score", &["credit score", "creditworthiness"]),
    ("Health info", &["health information", "medical"]),
    ("Fitness info", &["fitness", "physical activity", "step count"]),
    ("Emails", &["content of your emails", "email content"]),
    ("SMS or MMS", &["sms", "text messages", "mms"]),
    ("Other in-app messages", &["chat messages", "in-app messages", "messages you send"]),
    ("Photos", &["photos", "pictures", "images"]),
    ("Videos", &["videos"]),
    ("Voice or sound recordings", &["voice recordings", "audio recordings", "voice commands", "microphone"]),
    ("Music files", &["music files"]),
    ("Files and docs", &["files and documents", "documents you upload", "files you upload"]),
    ("Calendar events", &["calendar"]),
    ("Contacts", &["contact list", "address book", "your contacts"]),
    ("App interactions", &["interactions with the app", "how you use", "pages viewed", "features you use"]),
    ("In-app search history", &["search history", "search queries", "searches"]),
    ("Installed apps", &["installed apps", "installed applications", "other apps on your device"]),
    ("Other user-generated content", &["content you post", "reviews", "comments", "user content"]),
    ("Web browsing history", &["browsing history", "websites visited", "web pages you visit", "browsing activity"]),
    ("Crash logs", &["crash logs", "crash reports", "crash data"]),
    ("Diagnostics", &["diagnostic", "performance data", "battery"]),
    ("Device or other IDs", &["device identifier", "advertising id", "android id", "imei", "ip address", "device id"]),
];

fn word_spans(haystack: &str, phrase: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while let Some(pos) = haystack[start..].find(phrase) {
        let at = start + pos;
        let end = at + phrase.len();
        let before = haystack[..at].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after = haystack[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before && after {
            out.push((at, end));
        }
        start = at + phrase.chars().next().map_or(1, char::len_utf8);
    }
    out
}

#[cfg(test)]
fn contains_word(haystack: &str, phrase: &str) -> bool {
    !word_spans(haystack, phrase).is_empty()
}

/// Whether `sentence` (lowercased) names `t`, ignoring hits that sit inside a
/// longer term of another type ("address" within "email address").
fn mentions(sentence: &str, t: DataTypeId) -> bool {
    let others: Vec<(usize, usize)> = crate::taxonomy::all_data_types()
        .into_iter()
        .filter(|o| *o != t)
        .flat_map(|o| terms_for(o).into_iter().flat_map(|w| word_spans(sentence, &w)))
        .collect();
    terms_for(t).iter().any(|w| {
        word_spans(sentence, w).into_iter().any(|(a, b)| {
            !others
                .iter()
                .any(|&(oa, ob)| oa <= a && b <= ob && ob - oa > b - a)
        })
    })
}

fn terms_for(t: DataTypeId) -> Vec<String> {
    let mut terms: Vec<String> = data_type_terms(t).into_iter().map(|s| s.to_lowercase()).collect();
    if let Some((_, extra)) = EXTRA_TERMS.iter().find(|(n, _)| *n == t.name()) {
        terms.extend(extra.iter().map(|s| s.to_string()));
    }
    terms
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let s = text.find(open)? + open.len();
    let e = s + text[s..].find(close)?;
    Some(text[s..e].trim_matches('\n'))
}

fn tag_parts(tag: &str) -> (String, Option<PracticeKind>) {
    let parts: Vec<&str> = tag.split(':').collect();
    let practice = parts.get(2).and_then(|p| match *p {
        "collection" => Some(PracticeKind::Collection),
        "sharing" => Some(PracticeKind::Sharing),
        _ => None,
    });
    (parts.first().copied().unwrap_or_default().to_string(), practice)
}

fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for para in text.split("\n\n") {
        let para = normalize_whitespace(para);
        let mut cur = String::new();
        let chars: Vec<char> = para.chars().collect();
        for (i, &c) in chars.iter().enumerate() {
            cur.push(c);
            let boundary = matches!(c, '.' | '!' | '?' | ';')
                && chars.get(i + 1).is_none_or(|n| n.is_whitespace());
            if boundary {
                let s = cur.trim().to_string();
                if !s.is_empty() {
                    out.push(s);
                }
                cur.clear();
            }
        }
        let s = cur.trim().to_string();
        if !s.is_empty() {
            out.push(s);
        }
    }
    out
}

/// Keyword-rule stand-in for a chat model.
#[derive(Debug)]
pub struct HeuristicProvider {
    calls: AtomicUsize,
    engine: &'static ConstraintEngine,
}

impl Default for HeuristicProvider {
    fn default() -> Self {
        HeuristicProvider {
            calls: AtomicUsize::new(0),
            engine: ConstraintEngine::bundled(),
        }
    }
}

impl HeuristicProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn preprocess(&self, req: &ChatRequest, practice: PracticeKind) -> Result<String, ProviderError> {
        let policy = match req.attachment(POLICY_PDF_NAME) {
            Some(a) => extract_pdf_text(&a.content).map_err(|e| ProviderError::Permanent(e.to_string()))?,
            None => between(&req.user_text, "<<<POLICY\n", "\nPOLICY>>>")
                .ok_or_else(|| ProviderError::Permanent("no policy text in prompt".into()))?
                .to_string(),
        };
        let words = match practice {
            PracticeKind::Collection => COLLECTION_WORDS,
            _ => SHARING_WORDS,
        };
        let blocks: Vec<&str> = policy
            .lines()
            .map(str::trim)
            .filter(|l| {
                let low = l.to_lowercase();
                !l.is_empty() && words.iter().any(|w| low.contains(w))
            })
            .collect();
        if blocks.is_empty() {
            Ok("[BLANK]".to_string())
        } else {
            Ok(blocks.join("\n\n"))
        }
    }

    fn analyze(&self, req: &ChatRequest, practice: PracticeKind) -> Result<String, ProviderError> {
        let (summary, dss) = match (req.attachment(SUMMARY_TXT_NAME), req.attachment(DSS_JSON_NAME)) {
            (Some(s), Some(d)) => (
                String::from_utf8_lossy(&s.content).into_owned(),
                String::from_utf8_lossy(&d.content).into_owned(),
            ),
            _ => (
                between(&req.user_text, "<<<SUMMARY_PRIVACY_POLICY_TXT\n", "\nSUMMARY_PRIVACY_POLICY_TXT>>>")
                    .unwrap_or_default()
                    .to_string(),
                between(&req.user_text, "<<<DATA_SAFETY_STATEMENT\n", "\nDATA_SAFETY_STATEMENT>>>")
                    .unwrap_or("{}")
                    .to_string(),
            ),
        };
        let dss: Value = serde_json::from_str(&dss).unwrap_or(Value::Null);
        let section = match practice {
            PracticeKind::Collection => "data_collected",
            _ => "data_shared",
        };
        let declared: BTreeSet<DataTypeId> = dss[section]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|e| e["data_type"].as_str().and_then(|n| resolve_data_type(n, None)))
            .collect();
        let in_scope = scope_types(&req.user_text);
        let sentences = sentences(&summary);
        let lowered: Vec<String> = sentences.iter().map(|s| s.to_lowercase()).collect();
        let mut omitted = Vec::new();
        for t in in_scope.into_iter().filter(|t| !declared.contains(t)) {
            if let Some(i) = lowered.iter().position(|s| mentions(s, t)) {
                omitted.push(json!({
                    "data_type": t.name(),
                    "policy_reference": sentences[i],
                    "lang": "en",
                }));
            }
        }
        Ok(serde_json::to_string_pretty(&json!({ "omitted_declarations": omitted })).expect("json"))
    }

    fn postprocess(&self, req: &ChatRequest, practice: PracticeKind) -> Result<String, ProviderError> {
        let findings = between(&req.user_text, "<<<FINDINGS\n", "\nFINDINGS>>>")
            .ok_or_else(|| ProviderError::Permanent("no findings in prompt".into()))?;
        let root = extract_json_object(findings).map_err(|e| ProviderError::Permanent(e.to_string()))?;
        let mut seen = BTreeSet::new();
        let mut omitted = Vec::new();
        let mut excluded = Vec::new();
        for e in root["omitted_declarations"].as_array().into_iter().flatten() {
            let dt = e["data_type"].as_str().unwrap_or_default();
            let reference = e["policy_reference"].as_str().unwrap_or_default();
            let lang = e["lang"].as_str().unwrap_or("en");
            let key = (dt.to_lowercase(), normalize_for_match(reference));
            let removal = if !seen.insert(key) {
                Some(("duplicate".to_string(), "Repeats an earlier entry.".to_string()))
            } else if resolve_data_type(dt, None).is_none() {
                Some(("inconsistent_reference".to_string(), "Not a Data safety data type.".to_string()))
            } else {
                let tags = self.engine.scan_evidence(reference, practice);
                self.engine
                    .evaluate(practice, &tags)
                    .ok()
                    .filter(|d| d.exempt)
                    .and_then(|d| d.reason)
                    .map(|t| (t.to_string(), format!("The excerpt describes {}.", t.as_str().replace('_', " "))))
            };
            match removal {
                Some((reason, justification)) => excluded.push(json!({
                    "data_type": dt,
                    "policy_reference": reference,
                    "reason_of_removal": reason,
                    "justification": justification,
                    "lang": lang,
                })),
                None => omitted.push(json!({ "data_type": dt, "policy_reference": reference, "lang": lang })),
            }
        }
        Ok(serde_json::to_string_pretty(&json!({
            "omitted_declarations": omitted,
            "excluded_declarations": excluded,
        }))
        .expect("json"))
    }
}

/// Data types listed under the prompt's scope-of-review lines.
fn scope_types(prompt: &str) -> Vec<DataTypeId> {
    let mut out = Vec::new();
    for line in prompt.lines() {
        let Some(rest) = line.trim().strip_prefix("- ") else { continue };
        let Some((cat, types)) = rest.split_once(": ") else { continue };
        if resolve_category(cat).is_none() {
            continue;
        }
        for t in types.split("; ").filter_map(|t| resolve_data_type(t, None)) {
            if !out.contains(&t) {
                out.push(t);
            }
        }
    }
    out
}

fn response(req: &ChatRequest, text: String) -> ChatResponse {
    ChatResponse {
        usage: Usage {
            input_tokens: estimate_tokens(&req.user_text) as u64,
            output_tokens: estimate_tokens(&text) as u64,
        },
        text,
        finish_reason: FinishReason::Stop,
        latency_ms: 0,
        provider_meta: Default::default(),
    }
}

impl ChatProvider for HeuristicProvider {
    fn name(&self) -> &str {
        "heuristic"
    }

    fn supports_file_upload(&self) -> bool {
        true
    }

    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let (stage, practice) = tag_parts(&req.request_tag);
        let practice = practice.ok_or_else(|| ProviderError::Permanent(format!("unrecognized tag `{}`", req.request_tag)))?;
        let text = match stage.as_str() {
            "preprocess" => self.preprocess(req, practice)?,
            "analyze" => self.analyze(req, practice)?,
            "postprocess" => self.postprocess(req, practice)?,
            other => return Err(ProviderError::Permanent(format!("unknown stage `{other}`"))),
        };
        Ok(response(req, text))
    }
}

/// Canned replies keyed by exact request tag, with an optional fallback for
/// tags that have no script.
pub struct ScriptedProvider {
    replies: Mutex<HashMap<String, String>>,
    fallback: Option<Box<dyn ChatProvider>>,
    calls: AtomicUsize,
}

impl ScriptedProvider {
    pub fn new() -> Self {
        ScriptedProvider {
            replies: Mutex::new(HashMap::new()),
            fallback: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_fallback(mut self, p: impl ChatProvider + 'static) -> Self {
        self.fallback = Some(Box::new(p));
        self
    }

    pub fn script(self, tag: impl Into<String>, reply: impl Into<String>) -> Self {
        self.replies.lock().unwrap().insert(tag.into(), reply.into());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Default for ScriptedProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl ChatProvider for ScriptedProvider {
    fn name(&self) -> &str {
        "scripted"
    }

    fn supports_file_upload(&self) -> bool {
        true
    }

    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let scripted = self.replies.lock().unwrap().get(&req.request_tag).cloned();
        match (scripted, &self.fallback) {
            (Some(text), _) => Ok(response(req, text)),
            (None, Some(f)) => f.send(req),
            (None, None) => Err(ProviderError::Permanent(format!("no script for `{}`", req.request_tag))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentence_split_and_terms() {
        let s = sentences("We collect your email address. We share data with partners!\n\nSecond para");
        assert_eq!(s, vec!["We collect your email address.", "We share data with partners!", "Second para"]);
        let email = resolve_data_type("Email address", None).unwrap();
        assert!(terms_for(email).iter().any(|t| contains_word("your email address here", t)));
        assert!(!contains_word("emailaddress", "email address"));
        let address = DataTypeId::from_key("address").unwrap();
        assert!(!mentions("we collect your email address", address));
        assert!(mentions("we collect your email address and home address", address));
    }

    #[test]
    fn scope_lines_parse() {
        let p = "x\n- Location: Approximate location; Precise location\n- Nonsense: Name\n";
        assert_eq!(scope_types(p).len(), 2);
    }
}
