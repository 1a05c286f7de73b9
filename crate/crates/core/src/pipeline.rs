//! The three model stages: statement extraction, per-scope omission
//! analysis and post-processing, plus output validation and merging.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

use crate::constraints::{ConstraintEngine, ExemptionTag};
use crate::dss::{AppRef, DssRecord};
use crate::llm::{Attachment, ChatRequest, LlmClient, LlmError};
use crate::policy::PolicyDocument;
use crate::taxonomy::{
    all_categories, resolve_data_type, scope_groups, DataCategoryId, DataTypeId, PracticeKind,
    PromptStrategy, ScopeDescriptor,
};
use crate::text::{estimate_tokens, is_verbatim_in, normalize_for_match};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

const PREPROCESS_TEMPLATE: &str = include_str!("../data/prompts/preprocess.txt");
const ANALYZER_TEMPLATE: &str = include_str!("../data/prompts/analyzer.txt");
const POSTPROCESS_TEMPLATE: &str = include_str!("../data/prompts/postprocess.txt");
const FOCUS_COLLECTION: &str = include_str!("../data/prompts/focus_collection.txt");
const FOCUS_SHARING: &str = include_str!("../data/prompts/focus_sharing.txt");

pub const POLICY_PDF_NAME: &str = "privacy_policy.pdf";
pub const SUMMARY_TXT_NAME: &str = "summary_privacy_policy.txt";
pub const DSS_JSON_NAME: &str = "data_safety_statement.json";

const OMISSIONS_FORMAT: &str = r#"{
  "omitted_declarations": [
    {
      "data_type": "Data type",
      "policy_reference": "Exact excerpt from the privacy policy",
      "lang": "Policy language"
    }
  ]
}"#;
const OMISSIONS_EMPTY: &str = r#"{"omitted_declarations": []}"#;
const REVIEW_FORMAT: &str = r#"{
  "omitted_declarations": [
    {
      "data_type": "Data type",
      "policy_reference": "Exact excerpt from the privacy policy",
      "lang": "Policy language"
    }
  ],
  "excluded_declarations": [
    {
      "data_type": "Data type",
      "policy_reference": "Exact excerpt from the privacy policy",
      "reason_of_removal": "Keyword",
      "justification": "Why this is not a real omission",
      "lang": "Policy language"
    }
  ]
}"#;
const REPROMPT_NOTE: &str = "\n\nYour previous reply could not be parsed as JSON in the required shape. Reply again with the JSON object only.";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("no JSON object found in model output")]
    NoJsonFound,
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("prompt for `{tag}` needs ~{tokens} tokens, inline budget is {budget}")]
    TokenBudgetExceeded {
        tag: String,
        tokens: usize,
        budget: usize,
    },
    #[error("file-upload mode needs a PDF rendition of the policy")]
    MissingPdf,
    #[error("scopes of strategy {0} do not cover every data category")]
    ScopeCoverage(PromptStrategy),
    #[error("{0} is not an audited practice")]
    UnsupportedPractice(PracticeKind),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachmentMode {
    #[default]
    Inline,
    FileUpload,
}

impl FromStr for AttachmentMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inline" => Ok(AttachmentMode::Inline),
            "file_upload" | "file-upload" => Ok(AttachmentMode::FileUpload),
            other => Err(format!("unknown attachment mode `{other}`")),
        }
    }
}

/// Settings shared by every stage of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSettings {
    pub model_id: String,
    pub attachment_mode: AttachmentMode,
    pub temperature: f64,
    pub max_output: u32,
    /// Inline prompts larger than this fail at analysis and are chunked at
    /// pre-processing.
    pub inline_token_budget: usize,
    /// Chunk size used when pre-processing overflows the budget.
    pub chunk_tokens: usize,
    /// Scope prompts run concurrently up to this many at a time.
    pub scope_parallelism: usize,
}

impl Default for StageSettings {
    fn default() -> Self {
        StageSettings {
            model_id: "gemini-2.5-pro".to_string(),
            attachment_mode: AttachmentMode::Inline,
            temperature: 0.0,
            max_output: 16_384,
            inline_token_budget: 120_000,
            chunk_tokens: 30_000,
            scope_parallelism: 1,
        }
    }
}

fn practice_words(practice: PracticeKind) -> Result<(&'static str, &'static str, &'static str, &'static str), PipelineError> {
    // (noun, past participle, DSS section label, focus text)
    match practice {
        PracticeKind::Collection => Ok(("collection", "collected", "Data collected", FOCUS_COLLECTION)),
        PracticeKind::Sharing => Ok(("sharing", "shared", "Data shared", FOCUS_SHARING)),
        other => Err(PipelineError::UnsupportedPractice(other)),
    }
}

fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

/// One verbatim block returned by the extraction stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractBlock {
    pub text: String,
    pub verbatim: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementExtract {
    pub practice: PracticeKind,
    pub blocks: Vec<ExtractBlock>,
    pub source_url: String,
    pub verified_verbatim: bool,
}

impl StatementExtract {
    /// Text handed to the analyzer: blocks separated by blank lines.
    pub fn to_text(&self) -> String {
        let mut s = self
            .blocks
            .iter()
            .map(|b| b.text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n");
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }

    /// Rebuilds an extract from its saved text, re-verifying every block.
    pub fn from_text(text: &str, practice: PracticeKind, doc: &PolicyDocument) -> Self {
        let source = normalize_for_match(&doc.extracted_text);
        let blocks = split_blocks(text)
            .into_iter()
            .map(|b| ExtractBlock {
                verbatim: is_verbatim_in(&b, &source),
                text: b,
            })
            .collect::<Vec<_>>();
        StatementExtract {
            practice,
            verified_verbatim: blocks.iter().all(|b| b.verbatim),
            blocks,
            source_url: doc.url.clone(),
        }
    }
}

fn split_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        let t = line.trim();
        if t.is_empty() {
            if !cur.is_empty() {
                blocks.push(cur.join("\n"));
                cur.clear();
            }
        } else if t != "[BLANK]" && t != "[EXACT BLOCK]" {
            cur.push(t);
        }
    }
    if !cur.is_empty() {
        blocks.push(cur.join("\n"));
    }
    blocks
}

/// Common request context for one app.
#[derive(Debug, Clone, Copy)]
pub struct StageContext<'a> {
    pub package_name: &'a str,
    pub settings: &'a StageSettings,
    pub audit_dir: Option<&'a Path>,
    /// Run number; repeated runs send distinct samples.
    pub sample: u32,
}

fn base_request(ctx: &StageContext<'_>, text: String, tag: String) -> ChatRequest {
    let mut req = ChatRequest::new(&ctx.settings.model_id, text).with_tag(tag);
    req.temperature = ctx.settings.temperature;
    req.max_output = ctx.settings.max_output;
    req.sample = ctx.sample.max(1);
    req
}

/// Splits text into chunks of whole lines, each within `max_tokens`.
fn chunk_lines(text: &str, max_tokens: usize) -> Vec<String> {
    let mut chunks = Vec::new();
    let mut cur = String::new();
    for line in text.lines() {
        if !cur.is_empty() && estimate_tokens(&cur) + estimate_tokens(line) + 1 > max_tokens {
            chunks.push(std::mem::take(&mut cur));
        }
        cur.push_str(line);
        cur.push('\n');
    }
    if !cur.trim().is_empty() {
        chunks.push(cur);
    }
    chunks
}

/// Requests for the extraction stage. Inline prompts over budget are split
/// into line-aligned chunks, one request each.
pub fn build_preprocess_requests(
    doc: &PolicyDocument,
    pdf: Option<&[u8]>,
    practice: PracticeKind,
    ctx: &StageContext<'_>,
) -> Result<Vec<ChatRequest>, PipelineError> {
    let (noun, _, _, focus) = practice_words(practice)?;
    let tag = format!("preprocess:{}:{}", ctx.package_name, practice);
    match ctx.settings.attachment_mode {
        AttachmentMode::FileUpload => {
            let pdf = pdf.ok_or(PipelineError::MissingPdf)?;
            let text = fill(
                PREPROCESS_TEMPLATE,
                &[
                    ("PRACTICE_NOUN", noun),
                    ("SOURCE", "in the attached PDF"),
                    ("PRACTICE_DEFINITION", focus.trim_end()),
                    ("POLICY_INPUT", ""),
                ],
            );
            Ok(vec![base_request(ctx, text, tag).with_attachment(Attachment::new(
                POLICY_PDF_NAME,
                "application/pdf",
                pdf.to_vec(),
            ))])
        }
        AttachmentMode::Inline => {
            let render = |policy: &str| {
                fill(
                    PREPROCESS_TEMPLATE,
                    &[
                        ("PRACTICE_NOUN", noun),
                        ("SOURCE", "given below"),
                        ("PRACTICE_DEFINITION", focus.trim_end()),
                        (
                            "POLICY_INPUT",
                            &format!("\nPRIVACY POLICY TEXT:\n<<<POLICY\n{}\nPOLICY>>>", policy.trim_end()),
                        ),
                    ],
                )
            };
            let whole = render(&doc.extracted_text);
            if estimate_tokens(&whole) <= ctx.settings.inline_token_budget {
                return Ok(vec![base_request(ctx, whole, tag)]);
            }
            let overhead = estimate_tokens(&render(""));
            let room = ctx
                .settings
                .chunk_tokens
                .min(ctx.settings.inline_token_budget.saturating_sub(overhead))
                .max(1);
            Ok(chunk_lines(&doc.extracted_text, room)
                .into_iter()
                .enumerate()
                .map(|(i, chunk)| base_request(ctx, render(&chunk), format!("{tag}:chunk-{}", i + 1)))
                .collect())
        }
    }
}

/// Extraction stage. A `[BLANK]` reply yields zero blocks. Blocks that are
/// not verbatim substrings of the policy text are kept but flagged.
pub fn preprocess(
    doc: &PolicyDocument,
    pdf: Option<&[u8]>,
    practice: PracticeKind,
    client: &LlmClient,
    ctx: &StageContext<'_>,
) -> Result<StatementExtract, PipelineError> {
    let mut text = String::new();
    for req in build_preprocess_requests(doc, pdf, practice, ctx)? {
        let resp = client.complete(&req, ctx.audit_dir)?;
        text.push_str(&resp.text);
        text.push_str("\n\n");
    }
    let extract = StatementExtract::from_text(&text, practice, doc);
    for b in extract.blocks.iter().filter(|b| !b.verbatim) {
        warn!(package = ctx.package_name, %practice, "extracted block is not verbatim: {:.80}", b.text);
    }
    Ok(extract)
}

/// `- Category: Type; Type` lines for a scope.
pub fn scope_of_review(scope: &ScopeDescriptor) -> String {
    let mut by_cat: BTreeMap<DataCategoryId, Vec<&str>> = BTreeMap::new();
    for t in scope.data_types() {
        by_cat.entry(t.category()).or_default().push(t.name());
    }
    by_cat
        .into_iter()
        .map(|(c, types)| format!("- {}: {}", c.name(), types.join("; ")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The DSS as shown to the model: readable names, fixed field order.
pub fn dss_for_prompt(dss: &DssRecord) -> String {
    #[derive(Serialize)]
    struct Entry<'a> {
        data_type: &'a str,
        category: &'a str,
        purposes: Vec<&'a str>,
        optional: bool,
    }
    #[derive(Serialize)]
    struct View<'a> {
        package_name: &'a str,
        data_collected: Vec<Entry<'a>>,
        data_shared: Vec<Entry<'a>>,
        security_practices: Vec<String>,
    }
    fn entries(list: &[crate::dss::DssEntry]) -> Vec<Entry<'_>> {
        list.iter()
            .map(|e| Entry {
                data_type: e.data_type.name(),
                category: e.data_type.category().name(),
                purposes: e.purposes.iter().map(|p| p.name()).collect(),
                optional: e.optional,
            })
            .collect()
    }
    let view = View {
        package_name: &dss.app.package_name,
        data_collected: entries(&dss.collected),
        data_shared: entries(&dss.shared),
        security_practices: dss.security_practices.iter().map(|s| s.to_string()).collect(),
    };
    serde_json::to_string_pretty(&view).expect("view serializes")
}

pub fn build_analyzer_prompt(
    scope: &ScopeDescriptor,
    practice: PracticeKind,
    extract: &StatementExtract,
    dss: &DssRecord,
    engine: &ConstraintEngine,
    ctx: &StageContext<'_>,
) -> Result<ChatRequest, PipelineError> {
    let (noun, past, section, focus) = practice_words(practice)?;
    let tag = format!("analyze:{}:{}:{}", ctx.package_name, practice, scope.slug());
    let summary = extract.to_text();
    let dss_json = dss_for_prompt(dss);
    let scope_text = scope_of_review(scope);
    let exclusions = engine.exclusion_constraints_text(practice);
    let upload = ctx.settings.attachment_mode == AttachmentMode::FileUpload;
    let inline_inputs = if upload {
        String::new()
    } else {
        format!(
            "\n<<<SUMMARY_PRIVACY_POLICY_TXT\n{}\nSUMMARY_PRIVACY_POLICY_TXT>>>\n<<<DATA_SAFETY_STATEMENT\n{}\nDATA_SAFETY_STATEMENT>>>",
            summary.trim_end(),
            dss_json
        )
    };
    let (summary_ref, dss_ref) = if upload {
        ("attached file summary_privacy_policy.txt", "attached file data_safety_statement.json")
    } else {
        ("text between the SUMMARY_PRIVACY_POLICY_TXT markers below", "JSON between the DATA_SAFETY_STATEMENT markers below")
    };
    let text = fill(
        ANALYZER_TEMPLATE,
        &[
            ("SUMMARY_REF", summary_ref),
            ("DSS_REF", dss_ref),
            ("SCOPE_OF_REVIEW", &scope_text),
            ("EXCLUSION_CONSTRAINTS", &exclusions),
            ("PRACTICE_NOUN", noun),
            ("PRACTICE_PAST", past),
            ("DSS_SECTION", section),
            ("FOCUS", focus.trim_end()),
            ("JSON_FORMAT", OMISSIONS_FORMAT),
            ("JSON_EMPTY", OMISSIONS_EMPTY),
            ("INLINE_INPUTS", &inline_inputs),
        ],
    );
    let mut req = base_request(ctx, text, tag.clone());
    if upload {
        req = req
            .with_attachment(Attachment::new(SUMMARY_TXT_NAME, "text/plain", summary.into_bytes()))
            .with_attachment(Attachment::new(DSS_JSON_NAME, "application/json", dss_json.into_bytes()));
    } else {
        let tokens = estimate_tokens(&req.user_text);
        if tokens > ctx.settings.inline_token_budget {
            return Err(PipelineError::TokenBudgetExceeded {
                tag,
                tokens,
                budget: ctx.settings.inline_token_budget,
            });
        }
    }
    Ok(req)
}

/// One analyzer request per scope of the strategy. Fails if the scopes do
/// not jointly cover every data category.
pub fn build_analyzer_requests(
    strategy: PromptStrategy,
    practice: PracticeKind,
    extract: &StatementExtract,
    dss: &DssRecord,
    engine: &ConstraintEngine,
    ctx: &StageContext<'_>,
) -> Result<Vec<(ScopeDescriptor, ChatRequest)>, PipelineError> {
    let scopes = scope_groups(strategy);
    let covered: BTreeSet<DataCategoryId> = scopes.iter().flat_map(|s| s.categories.iter().copied()).collect();
    if covered.len() != all_categories().len() {
        return Err(PipelineError::ScopeCoverage(strategy));
    }
    scopes
        .into_iter()
        .map(|s| {
            let req = build_analyzer_prompt(&s, practice, extract, dss, engine, ctx)?;
            Ok((s, req))
        })
        .collect()
}

/// A candidate omission as emitted by the analyzer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub data_type_text: String,
    pub data_type: Option<DataTypeId>,
    pub policy_reference: String,
    pub lang: String,
    pub practice: PracticeKind,
    pub scope_label: String,
}

impl Finding {
    fn key(&self) -> (String, String) {
        finding_key(&self.data_type_text, &self.policy_reference)
    }
}

fn finding_key(data_type_text: &str, policy_reference: &str) -> (String, String) {
    (
        normalize_for_match(data_type_text).to_lowercase(),
        normalize_for_match(policy_reference),
    )
}

/// Finds the outermost JSON object in model output, tolerating code fences
/// and surrounding prose.
pub fn extract_json_object(text: &str) -> Result<Value, PipelineError> {
    let bytes = text.as_bytes();
    let mut saw_open = false;
    let mut last_err = None;
    let mut start = 0;
    while let Some(rel) = text[start..].find('{') {
        let open = start + rel;
        saw_open = true;
        match balanced_end(bytes, open) {
            Some(end) => match serde_json::from_str::<Value>(&text[open..=end]) {
                Ok(v) => return Ok(v),
                Err(e) => last_err = Some(e.to_string()),
            },
            None => {
                last_err.get_or_insert_with(|| "unterminated JSON object".to_string());
            }
        }
        start = open + 1;
    }
    if !saw_open {
        return Err(PipelineError::NoJsonFound);
    }
    Err(PipelineError::SchemaViolation(
        last_err.unwrap_or_else(|| "malformed JSON".into()),
    ))
}

fn balanced_end(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_str {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn required_str<'a>(entry: &'a Value, key: &str, ctx: &str) -> Result<&'a str, PipelineError> {
    match entry.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(PipelineError::SchemaViolation(format!(
            "{ctx}: `{key}` must be a string, found {}",
            json_kind(other)
        ))),
        None => Err(PipelineError::SchemaViolation(format!("{ctx}: missing `{key}`"))),
    }
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn entries<'a>(root: &'a Value, key: &str) -> Result<&'a Vec<Value>, PipelineError> {
    match root.get(key) {
        Some(Value::Array(a)) => Ok(a),
        Some(other) => Err(PipelineError::SchemaViolation(format!(
            "`{key}` must be an array, found {}",
            json_kind(other)
        ))),
        None => Err(PipelineError::SchemaViolation(format!("missing `{key}`"))),
    }
}

/// Raw omitted-declaration entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OmittedEntry {
    pub data_type: String,
    pub policy_reference: String,
    pub lang: String,
}

/// Raw excluded-declaration entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedEntry {
    pub data_type: String,
    pub policy_reference: String,
    pub reason_of_removal: String,
    pub justification: String,
    pub lang: String,
}

fn parse_omitted_entries(root: &Value) -> Result<Vec<OmittedEntry>, PipelineError> {
    entries(root, "omitted_declarations")?
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let ctx = format!("omitted_declarations[{i}]");
            if !e.is_object() {
                return Err(PipelineError::SchemaViolation(format!("{ctx} is not an object")));
            }
            let data_type = required_str(e, "data_type", &ctx)?;
            let policy_reference = required_str(e, "policy_reference", &ctx)?;
            let lang = required_str(e, "lang", &ctx)?;
            if data_type.trim().is_empty() || policy_reference.trim().is_empty() {
                return Err(PipelineError::SchemaViolation(format!(
                    "{ctx}: empty data_type or policy_reference"
                )));
            }
            Ok(OmittedEntry {
                data_type: data_type.to_string(),
                policy_reference: policy_reference.to_string(),
                lang: lang.to_string(),
            })
        })
        .collect()
}

fn parse_excluded_entries(root: &Value) -> Result<Vec<ExcludedEntry>, PipelineError> {
    entries(root, "excluded_declarations")?
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let ctx = format!("excluded_declarations[{i}]");
            if !e.is_object() {
                return Err(PipelineError::SchemaViolation(format!("{ctx} is not an object")));
            }
            let out = ExcludedEntry {
                data_type: required_str(e, "data_type", &ctx)?.to_string(),
                policy_reference: required_str(e, "policy_reference", &ctx)?.to_string(),
                reason_of_removal: required_str(e, "reason_of_removal", &ctx)?.to_string(),
                justification: required_str(e, "justification", &ctx)?.to_string(),
                lang: required_str(e, "lang", &ctx)?.to_string(),
            };
            if out.data_type.trim().is_empty() || out.policy_reference.trim().is_empty() {
                return Err(PipelineError::SchemaViolation(format!(
                    "{ctx}: empty data_type or policy_reference"
                )));
            }
            Ok(out)
        })
        .collect()
}

/// Parses an analyzer reply into findings, resolving data type names.
pub fn parse_analyzer_output(
    text: &str,
    practice: PracticeKind,
    scope_label: &str,
) -> Result<Vec<Finding>, PipelineError> {
    let root = extract_json_object(text)?;
    Ok(parse_omitted_entries(&root)?
        .into_iter()
        .map(|e| Finding {
            data_type: resolve_data_type(&e.data_type, Some(&e.lang)),
            data_type_text: e.data_type,
            policy_reference: e.policy_reference,
            lang: e.lang,
            practice,
            scope_label: scope_label.to_string(),
        })
        .collect())
}

/// A merged finding with every scope that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedFinding {
    pub finding: Finding,
    pub scopes: Vec<String>,
}

/// Order-stable concatenation, dropping exact duplicates on the normalized
/// (data type text, policy reference) pair.
pub fn merge_findings(per_scope: Vec<Vec<Finding>>) -> Vec<MergedFinding> {
    let mut out: Vec<MergedFinding> = Vec::new();
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    for f in per_scope.into_iter().flatten() {
        match index.get(&f.key()) {
            Some(&i) => {
                let scopes = &mut out[i].scopes;
                if !scopes.contains(&f.scope_label) {
                    scopes.push(f.scope_label.clone());
                }
            }
            None => {
                index.insert(f.key(), out.len());
                out.push(MergedFinding {
                    scopes: vec![f.scope_label.clone()],
                    finding: f,
                });
            }
        }
    }
    out
}

/// Runs every scope prompt of a strategy and merges the results.
pub fn analyze(
    strategy: PromptStrategy,
    practice: PracticeKind,
    extract: &StatementExtract,
    dss: &DssRecord,
    engine: &ConstraintEngine,
    client: &LlmClient,
    ctx: &StageContext<'_>,
) -> Result<Vec<MergedFinding>, PipelineError> {
    let requests = build_analyzer_requests(strategy, practice, extract, dss, engine, ctx)?;
    let run_one = |(scope, req): &(ScopeDescriptor, ChatRequest)| -> Result<Vec<Finding>, PipelineError> {
        let resp = client.complete(req, ctx.audit_dir)?;
        match parse_analyzer_output(&resp.text, practice, &scope.label) {
            Ok(f) => Ok(f),
            Err(PipelineError::NoJsonFound | PipelineError::SchemaViolation(_)) => {
                let mut retry = req.clone();
                retry.user_text.push_str(REPROMPT_NOTE);
                retry.request_tag.push_str(":retry");
                let resp = client.complete(&retry, ctx.audit_dir)?;
                parse_analyzer_output(&resp.text, practice, &scope.label)
            }
            Err(e) => Err(e),
        }
    };
    let width = ctx.settings.scope_parallelism.max(1);
    let mut per_scope = Vec::with_capacity(requests.len());
    for batch in requests.chunks(width) {
        let results: Vec<Result<Vec<Finding>, PipelineError>> = if width == 1 {
            batch.iter().map(run_one).collect()
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = batch.iter().map(|r| s.spawn(move || run_one(r))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("scope worker panicked"))
                    .collect()
            })
        };
        for r in results {
            per_scope.push(r?);
        }
    }
    Ok(merge_findings(per_scope))
}

/// Why a candidate omission was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RemovalReason {
    Exemption(ExemptionTag),
    InconsistentReference,
    Duplicate,
    LlmJudgment,
}

impl RemovalReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RemovalReason::Exemption(t) => t.as_str(),
            RemovalReason::InconsistentReference => "inconsistent_reference",
            RemovalReason::Duplicate => "duplicate",
            RemovalReason::LlmJudgment => "llm_judgment",
        }
    }

    /// Maps a model-emitted keyword; `None` for anything outside the
    /// closed set.
    pub fn from_keyword(k: &str) -> Option<Self> {
        let norm = k.trim().to_lowercase().replace([' ', '-'], "_");
        match norm.as_str() {
            "inconsistent_reference" | "inconsistent" | "inconsistency" | "inconsistent_entry"
            | "mismatch" => Some(RemovalReason::InconsistentReference),
            "duplicate" | "duplicates" | "duplicate_entry" => Some(RemovalReason::Duplicate),
            "llm_judgment" => Some(RemovalReason::LlmJudgment),
            _ => ExemptionTag::from_keyword(&norm).map(RemovalReason::Exemption),
        }
    }
}

impl fmt::Display for RemovalReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RemovalReason {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inconsistent_reference" => Ok(RemovalReason::InconsistentReference),
            "duplicate" => Ok(RemovalReason::Duplicate),
            "llm_judgment" => Ok(RemovalReason::LlmJudgment),
            other => other
                .parse::<ExemptionTag>()
                .map(RemovalReason::Exemption)
                .map_err(|_| format!("unknown removal reason `{other}`")),
        }
    }
}

impl Serialize for RemovalReason {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for RemovalReason {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExcludedFinding {
    pub finding: Finding,
    pub reason: RemovalReason,
    pub justification: String,
}

/// Audit trail of one finding through post-processing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FindingTrail {
    pub data_type_text: String,
    pub resolved_data_type: Option<DataTypeId>,
    pub scopes: Vec<String>,
    /// The model's own verdict: `omitted` or a removal keyword.
    pub llm_verdict: String,
    pub evidence_tags: Vec<ExemptionTag>,
    /// Whether the deterministic rule overrode the model.
    pub overridden: bool,
    pub verbatim: bool,
    pub model_lang: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub package_name: String,
    pub store_category: String,
    pub practice: PracticeKind,
    pub run_id: u32,
    pub strategy: PromptStrategy,
    pub model_id: String,
    pub omitted: Vec<FindingTrail>,
    pub excluded: Vec<FindingTrail>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Final per-practice result for one app and run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalysisReport {
    pub app: AppRef,
    pub practice: PracticeKind,
    pub run_id: u32,
    pub omitted: Vec<Finding>,
    pub excluded: Vec<ExcludedFinding>,
    pub provenance: ReportProvenance,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    schema_version: u32,
    omitted_declarations: Vec<OmittedEntry>,
    excluded_declarations: Vec<ExcludedEntry>,
    provenance: ReportProvenance,
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        let file = ReportFile {
            schema_version: REPORT_SCHEMA_VERSION,
            omitted_declarations: self
                .omitted
                .iter()
                .map(|f| OmittedEntry {
                    data_type: f.data_type_text.clone(),
                    policy_reference: f.policy_reference.clone(),
                    lang: f.lang.clone(),
                })
                .collect(),
            excluded_declarations: self
                .excluded
                .iter()
                .map(|x| ExcludedEntry {
                    data_type: x.finding.data_type_text.clone(),
                    policy_reference: x.finding.policy_reference.clone(),
                    reason_of_removal: x.reason.to_string(),
                    justification: x.justification.clone(),
                    lang: x.finding.lang.clone(),
                })
                .collect(),
            provenance: self.provenance.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let file: ReportFile =
            serde_json::from_str(text).map_err(|e| PipelineError::SchemaViolation(e.to_string()))?;
        if file.schema_version != REPORT_SCHEMA_VERSION {
            return Err(PipelineError::SchemaViolation(format!(
                "unsupported schema_version {}",
                file.schema_version
            )));
        }
        let p = file.provenance;
        if p.omitted.len() != file.omitted_declarations.len() || p.excluded.len() != file.excluded_declarations.len() {
            return Err(PipelineError::SchemaViolation("provenance does not match declarations".into()));
        }
        let finding = |dt: &str, reference: &str, lang: &str, trail: &FindingTrail| Finding {
            data_type_text: dt.to_string(),
            data_type: trail.resolved_data_type,
            policy_reference: reference.to_string(),
            lang: lang.to_string(),
            practice: p.practice,
            scope_label: trail.scopes.first().cloned().unwrap_or_default(),
        };
        let omitted = file
            .omitted_declarations
            .iter()
            .zip(&p.omitted)
            .map(|(e, t)| finding(&e.data_type, &e.policy_reference, &e.lang, t))
            .collect();
        let excluded = file
            .excluded_declarations
            .iter()
            .zip(&p.excluded)
            .map(|(e, t)| {
                Ok(ExcludedFinding {
                    finding: finding(&e.data_type, &e.policy_reference, &e.lang, t),
                    reason: e.reason_of_removal.parse().map_err(PipelineError::SchemaViolation)?,
                    justification: e.justification.clone(),
                })
            })
            .collect::<Result<_, PipelineError>>()?;
        Ok(AnalysisReport {
            app: AppRef {
                package_name: p.package_name.clone(),
                store_category: p.store_category.clone(),
                installs_floor: 0,
            },
            practice: p.practice,
            run_id: p.run_id,
            omitted,
            excluded,
            provenance: p,
        })
    }
}

/// The analyzer's merged output file (analyzer reply shape plus scope trail).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FindingsFile {
    pub schema_version: u32,
    pub omitted_declarations: Vec<OmittedEntry>,
    pub provenance: FindingsProvenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FindingsProvenance {
    pub practice: PracticeKind,
    pub strategy: PromptStrategy,
    pub scopes: Vec<Vec<String>>,
}

impl FindingsFile {
    pub fn new(merged: &[MergedFinding], practice: PracticeKind, strategy: PromptStrategy) -> Self {
        FindingsFile {
            schema_version: REPORT_SCHEMA_VERSION,
            omitted_declarations: merged
                .iter()
                .map(|m| OmittedEntry {
                    data_type: m.finding.data_type_text.clone(),
                    policy_reference: m.finding.policy_reference.clone(),
                    lang: m.finding.lang.clone(),
                })
                .collect(),
            provenance: FindingsProvenance {
                practice,
                strategy,
                scopes: merged.iter().map(|m| m.scopes.clone()).collect(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("findings serialize");
        s.push('\n');
        s
    }

    pub fn merged(&self) -> Vec<MergedFinding> {
        self.omitted_declarations
            .iter()
            .zip(self.provenance.scopes.iter().chain(std::iter::repeat(&Vec::new())))
            .map(|(e, scopes)| MergedFinding {
                finding: Finding {
                    data_type: resolve_data_type(&e.data_type, Some(&e.lang)),
                    data_type_text: e.data_type.clone(),
                    policy_reference: e.policy_reference.clone(),
                    lang: e.lang.clone(),
                    practice: self.provenance.practice,
                    scope_label: scopes.first().cloned().unwrap_or_default(),
                },
                scopes: scopes.clone(),
            })
            .collect()
    }
}

pub fn build_postprocess_prompt(
    findings: &[MergedFinding],
    practice: PracticeKind,
    engine: &ConstraintEngine,
    ctx: &StageContext<'_>,
) -> Result<ChatRequest, PipelineError> {
    let (noun, _, section, _) = practice_words(practice)?;
    let listing: Vec<OmittedEntry> = findings
        .iter()
        .map(|m| OmittedEntry {
            data_type: m.finding.data_type_text.clone(),
            policy_reference: m.finding.policy_reference.clone(),
            lang: m.finding.lang.clone(),
        })
        .collect();
    let findings_json = serde_json::to_string_pretty(&serde_json::json!({ "omitted_declarations": listing }))
        .expect("findings serialize");
    let text = fill(
        POSTPROCESS_TEMPLATE,
        &[
            ("PRACTICE_NOUN", noun),
            ("DSS_SECTION", section),
            ("EXCLUSION_CONSTRAINTS", &engine.exclusion_constraints_text(practice)),
            ("JSON_FORMAT", REVIEW_FORMAT),
            ("FINDINGS_JSON", &findings_json),
        ],
    );
    Ok(base_request(ctx, text, format!("postprocess:{}:{}", ctx.package_name, practice)))
}

/// Parsed post-processing reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostprocessReply {
    pub omitted: Vec<OmittedEntry>,
    pub excluded: Vec<ExcludedEntry>,
}

pub fn parse_postprocess_output(text: &str) -> Result<PostprocessReply, PipelineError> {
    let root = extract_json_object(text)?;
    Ok(PostprocessReply {
        omitted: parse_omitted_entries(&root)?,
        excluded: parse_excluded_entries(&root)?,
    })
}

/// Inputs for post-processing that are not model-related.
#[derive(Debug, Clone)]
pub struct PostprocessInput<'a> {
    pub app: &'a AppRef,
    pub policy: &'a PolicyDocument,
    pub run_id: u32,
    pub strategy: PromptStrategy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Verdict {
    Omitted,
    Removed(RemovalReason, String),
}

/// Post-processing: model review, then a deterministic pass.
///
/// Every input ends up in exactly one of `omitted` / `excluded`. Later exact
/// duplicates are excluded as `duplicate`. Exemption verdicts are recomputed
/// by the rule engine from the model's tag plus keyword evidence in the
/// excerpt, and the rule wins on disagreement. Non-exemption exclusions by
/// the model are kept; unknown reasons become `llm_judgment`.
pub fn postprocess(
    findings: &[MergedFinding],
    practice: PracticeKind,
    client: &LlmClient,
    engine: &ConstraintEngine,
    input: &PostprocessInput<'_>,
    ctx: &StageContext<'_>,
) -> Result<AnalysisReport, PipelineError> {
    practice_words(practice)?;
    let mut warnings = Vec::new();
    let reply = if findings.is_empty() {
        PostprocessReply {
            omitted: Vec::new(),
            excluded: Vec::new(),
        }
    } else {
        let req = build_postprocess_prompt(findings, practice, engine, ctx)?;
        let resp = client.complete(&req, ctx.audit_dir)?;
        match parse_postprocess_output(&resp.text) {
            Ok(r) => r,
            Err(PipelineError::NoJsonFound | PipelineError::SchemaViolation(_)) => {
                warnings.push("post-processing reply unparseable; re-prompted once".to_string());
                let mut retry = req.clone();
                retry.user_text.push_str(REPROMPT_NOTE);
                retry.request_tag.push_str(":retry");
                let resp = client.complete(&retry, ctx.audit_dir)?;
                parse_postprocess_output(&resp.text)?
            }
            Err(e) => return Err(e),
        }
    };
    let verdicts = map_verdicts(findings, &reply, &mut warnings);
    let mut report = assemble_report(findings, verdicts, practice, engine, input, warnings)?;
    report.provenance.model_id = ctx.settings.model_id.clone();
    Ok(report)
}

/// Matches reply entries back to inputs by normalized key; each reply entry
/// is used at most once.
fn map_verdicts(findings: &[MergedFinding], reply: &PostprocessReply, warnings: &mut Vec<String>) -> Vec<Verdict> {
    let mut pool: HashMap<(String, String), Vec<Verdict>> = HashMap::new();
    for e in &reply.omitted {
        pool.entry(finding_key(&e.data_type, &e.policy_reference)).or_default().push(Verdict::Omitted);
    }
    for e in &reply.excluded {
        let reason = match RemovalReason::from_keyword(&e.reason_of_removal) {
            Some(r) => r,
            None => {
                warnings.push(format!(
                    "unknown removal reason `{}` remapped to llm_judgment",
                    e.reason_of_removal
                ));
                RemovalReason::LlmJudgment
            }
        };
        pool.entry(finding_key(&e.data_type, &e.policy_reference))
            .or_default()
            .push(Verdict::Removed(reason, e.justification.clone()));
    }
    for v in pool.values_mut() {
        v.reverse();
    }
    let verdicts: Vec<Verdict> = findings
        .iter()
        .map(|m| match pool.get_mut(&m.finding.key()).and_then(Vec::pop) {
            Some(v) => v,
            None => Verdict::Removed(
                RemovalReason::LlmJudgment,
                "dropped by post-processing without a stated reason".to_string(),
            ),
        })
        .collect();
    let unmatched: usize = pool.values().map(Vec::len).sum();
    if unmatched > 0 {
        warnings.push(format!("{unmatched} post-processing entries matched no input and were ignored"));
    }
    verdicts
}

fn assemble_report(
    findings: &[MergedFinding],
    verdicts: Vec<Verdict>,
    practice: PracticeKind,
    engine: &ConstraintEngine,
    input: &PostprocessInput<'_>,
    mut warnings: Vec<String>,
) -> Result<AnalysisReport, PipelineError> {
    let source = normalize_for_match(&input.policy.extracted_text);
    let mut seen = BTreeSet::new();
    let mut omitted = Vec::new();
    let mut excluded = Vec::new();
    let mut omitted_trail = Vec::new();
    let mut excluded_trail = Vec::new();
    for (m, verdict) in findings.iter().zip(verdicts) {
        let mut f = m.finding.clone();
        let model_lang = std::mem::replace(&mut f.lang, input.policy.lang.clone());
        let evidence = engine.scan_evidence(&f.policy_reference, practice);
        let llm_verdict = match &verdict {
            Verdict::Omitted => "omitted".to_string(),
            Verdict::Removed(r, _) => r.to_string(),
        };
        let mut trail = FindingTrail {
            data_type_text: f.data_type_text.clone(),
            resolved_data_type: f.data_type,
            scopes: m.scopes.clone(),
            llm_verdict,
            evidence_tags: evidence.iter().copied().collect(),
            overridden: false,
            verbatim: is_verbatim_in(&f.policy_reference, &source),
            model_lang,
        };
        if !seen.insert(f.key()) {
            excluded.push(ExcludedFinding {
                finding: f,
                reason: RemovalReason::Duplicate,
                justification: "same data type and policy reference as an earlier entry".to_string(),
            });
            trail.overridden = !matches!(verdict, Verdict::Removed(RemovalReason::Duplicate, _));
            excluded_trail.push(trail);
            continue;
        }
        let mut tags = evidence.clone();
        if let Verdict::Removed(RemovalReason::Exemption(t), _) = &verdict {
            if engine.applies_to(*t, practice) {
                tags.insert(*t);
            } else {
                warnings.push(format!("exemption `{t}` does not apply to {practice}; ignored"));
            }
        }
        let decision = engine
            .evaluate(practice, &tags)
            .expect("tags are filtered to the practice");
        let outcome = match (&verdict, decision.exempt) {
            (_, true) => {
                let tag = decision.reason.expect("exempt decisions carry a reason");
                let justification = match &verdict {
                    Verdict::Removed(RemovalReason::Exemption(t), j) if *t == tag => j.clone(),
                    _ => decision.canonical_text.clone(),
                };
                trail.overridden = !matches!(&verdict, Verdict::Removed(RemovalReason::Exemption(t), _) if *t == tag);
                Some((RemovalReason::Exemption(tag), justification))
            }
            (Verdict::Removed(RemovalReason::Exemption(_), _), false) => {
                trail.overridden = true;
                None
            }
            (Verdict::Removed(RemovalReason::Duplicate, _), false) => {
                // not a duplicate by the deterministic key; treat as a model judgment
                Some((RemovalReason::LlmJudgment, "model marked as duplicate of a non-identical entry".to_string()))
            }
            (Verdict::Removed(r, j), false) => Some((*r, j.clone())),
            (Verdict::Omitted, false) => None,
        };
        if trail.overridden {
            warnings.push(format!(
                "rule engine overrode model verdict `{}` for `{}`",
                trail.llm_verdict, f.data_type_text
            ));
        }
        match outcome {
            Some((reason, justification)) => {
                excluded.push(ExcludedFinding {
                    finding: f,
                    reason,
                    justification,
                });
                excluded_trail.push(trail);
            }
            None => {
                if !trail.verbatim {
                    warnings.push(format!("policy_reference for `{}` is not verbatim in the policy", f.data_type_text));
                }
                omitted.push(f);
                omitted_trail.push(trail);
            }
        }
    }
    debug_assert_eq!(omitted.len() + excluded.len(), findings.len());
    Ok(AnalysisReport {
        app: input.app.clone(),
        practice,
        run_id: input.run_id,
        provenance: ReportProvenance {
            package_name: input.app.package_name.clone(),
            store_category: input.app.store_category.clone(),
            practice,
            run_id: input.run_id,
            strategy: input.strategy,
            model_id: String::new(),
            omitted: omitted_trail,
            excluded: excluded_trail,
            warnings,
        },
        omitted,
        excluded,
    })
}

/// Unverified-excerpt screen: omitted findings whose reference is not a
/// normalized substring of the policy text.
pub fn unverified_references<'a>(report: &'a AnalysisReport, policy_text: &str) -> Vec<&'a Finding> {
    let source = normalize_for_match(policy_text);
    report
        .omitted
        .iter()
        .filter(|f| !is_verbatim_in(&f.policy_reference, &source))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finding(dt: &str, r: &str, scope: &str) -> Finding {
        Finding {
            data_type_text: dt.into(),
            data_type: resolve_data_type(dt, None),
            policy_reference: r.into(),
            lang: "en".into(),
            practice: PracticeKind::Collection,
            scope_label: scope.into(),
        }
    }

    #[test]
    fn json_extraction_tolerates_wrappers() {
        let fenced = "Here you go:\n```json\n{\"omitted_declarations\": []}\n```";
        assert!(extract_json_object(fenced).is_ok());
        let braces_in_strings = r#"{"omitted_declarations": [{"data_type": "Name", "policy_reference": "a } b {", "lang": "en"}]}"#;
        assert_eq!(parse_analyzer_output(braces_in_strings, PracticeKind::Collection, "s").unwrap().len(), 1);
        assert!(matches!(extract_json_object("no json here"), Err(PipelineError::NoJsonFound)));
        assert!(matches!(
            extract_json_object("{\"omitted_declarations\": ["),
            Err(PipelineError::SchemaViolation(_))
        ));
    }

    #[test]
    fn merge_dedups_and_keeps_scopes() {
        let a = finding("Email address", "We collect email.", "User Data");
        let b = finding("email  address", "We collect  email.", "All data categories");
        let c = finding("Email address", "Other text.", "User Data");
        let merged = merge_findings(vec![vec![a.clone(), c.clone()], vec![b]]);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].scopes, vec!["User Data", "All data categories"]);
        assert_eq!(merged[1].finding, c);
    }

    #[test]
    fn removal_reason_keywords() {
        assert_eq!(RemovalReason::from_keyword("Duplicate"), Some(RemovalReason::Duplicate));
        assert_eq!(
            RemovalReason::from_keyword("on-device processing"),
            Some(RemovalReason::Exemption(ExemptionTag::OnDeviceProcessing))
        );
        assert_eq!(RemovalReason::from_keyword("vibes"), None);
        assert_eq!("service_provider".parse::<RemovalReason>().unwrap().to_string(), "service_provider");
    }

    #[test]
    fn chunking_respects_budget() {
        let text = (0..100).map(|i| format!("line number {i} of the policy")).collect::<Vec<_>>().join("\n");
        let chunks = chunk_lines(&text, 50);
        assert!(chunks.len() > 1);
        assert!(chunks.iter().all(|c| estimate_tokens(c) <= 50));
        assert_eq!(chunks.concat().trim_end(), text);
    }
}
