//! Configuration, stage sequencing with resumable markers, and the batch
//! commands behind the CLI.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::constraints::ConstraintEngine;
use crate::dss::{datasafety_url, fetch_dss, AppRef, DssError, DssRecord};
use crate::eval::{evaluate_runs, sweep, EvalError, EvaluationReport, SweepTable, TruthSet};
use crate::fetch::{FixtureFetcher, HttpFetcher, OfflineFetcher, PageFetcher, RateLimiter};
use crate::heuristic::HeuristicProvider;
use crate::llm::{ChatProvider, LlmClient, OpenAiCompatibleProvider, TranscriptMode, TranscriptStore};
use crate::pipeline::{
    analyze, postprocess, preprocess, AnalysisReport, AttachmentMode, FindingsFile, PipelineError,
    PostprocessInput, StageContext, StageSettings, StatementExtract,
};
use crate::policy::{duration_ms, fetch_policy, pdf_path, ExternalRenderer, FetchConfig, PolicyDocument, PolicyError, Renderer, TextPdfRenderer};
use crate::reporting::{app_report_markdown, emit, load_replication_dir, summarize, CorpusSummary, EmitFormat, ReportError};
use crate::taxonomy::{PracticeKind, PromptStrategy};
use crate::text::sha256_hex;
use crate::workspace::{digest_file, write_atomic, AppWorkspace};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Dss(#[from] DssError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("no privacy policy URL known for `{0}`")]
    NoPolicyUrl(String),
    #[error("missing artifact {0}; run the earlier stage first")]
    MissingArtifact(PathBuf),
    #[error("conservation violated for {package} {practice}: {input} findings in, {output} out")]
    Conservation {
        package: String,
        practice: PracticeKind,
        input: usize,
        output: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    None,
    Heuristic,
    OpenaiCompatible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    #[serde(with = "duration_ms", rename = "timeout_ms")]
    pub timeout: Duration,
    pub file_upload: bool,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::None,
            endpoint: String::new(),
            api_key_env: "DSSCHECK_API_KEY".to_string(),
            timeout: Duration::from_secs(600),
            file_upload: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RendererKind {
    None,
    /// Built-in text-layer PDF.
    #[default]
    Text,
    /// `fetch.renderer_command`.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model_id: String,
    pub attachment_mode: AttachmentMode,
    pub prompt_strategy: PromptStrategy,
    pub temperature: f64,
    pub max_output: u32,
    pub inline_token_budget: usize,
    pub chunk_tokens: usize,
    pub scope_parallelism: usize,
    pub transcript_mode: TranscriptMode,
    /// Defaults to `<workdir>/transcripts`.
    pub transcript_dir: Option<PathBuf>,
    pub fetch: FetchConfig,
    #[serde(with = "duration_ms", rename = "llm_rate_limit_interval_ms")]
    pub llm_rate_limit_interval: Duration,
    pub workdir: PathBuf,
    pub runs: u32,
    pub parallelism: usize,
    /// Captured payloads served instead of the network.
    pub fixtures_dir: Option<PathBuf>,
    pub provider: ProviderConfig,
    pub renderer: RendererKind,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let s = StageSettings::default();
        PipelineConfig {
            model_id: s.model_id,
            attachment_mode: s.attachment_mode,
            prompt_strategy: PromptStrategy::ThreeGroups,
            temperature: s.temperature,
            max_output: s.max_output,
            inline_token_budget: s.inline_token_budget,
            chunk_tokens: s.chunk_tokens,
            scope_parallelism: s.scope_parallelism,
            transcript_mode: TranscriptMode::Replay,
            transcript_dir: None,
            fetch: FetchConfig::default(),
            llm_rate_limit_interval: Duration::ZERO,
            workdir: PathBuf::from("work"),
            runs: 1,
            parallelism: 1,
            fixtures_dir: None,
            provider: ProviderConfig::default(),
            renderer: RendererKind::Text,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, OrchestratorError> {
        let c: PipelineConfig = toml::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = fs::read_to_string(path)
            .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::Config(m.to_string()));
        if self.runs == 0 {
            return bad("runs must be at least 1");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1");
        }
        if self.scope_parallelism == 0 {
            return bad("scope_parallelism must be at least 1");
        }
        if self.model_id.trim().is_empty() {
            return bad("model_id is empty");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must be within [0, 2]");
        }
        if self.renderer == RendererKind::External && self.fetch.renderer_command.is_none() {
            return bad("renderer = external needs fetch.renderer_command");
        }
        if self.attachment_mode == AttachmentMode::FileUpload && self.renderer == RendererKind::None {
            return bad("file_upload attachment mode needs a PDF renderer");
        }
        if self.provider.kind == ProviderKind::OpenaiCompatible && self.provider.endpoint.is_empty() {
            return bad("provider.endpoint is empty");
        }
        Ok(())
    }

    pub fn stage_settings(&self) -> StageSettings {
        StageSettings {
            model_id: self.model_id.clone(),
            attachment_mode: self.attachment_mode,
            temperature: self.temperature,
            max_output: self.max_output,
            inline_token_budget: self.inline_token_budget,
            chunk_tokens: self.chunk_tokens,
            scope_parallelism: self.scope_parallelism,
        }
    }

    pub fn transcript_path(&self) -> PathBuf {
        self.transcript_dir.clone().unwrap_or_else(|| self.workdir.join("transcripts"))
    }
}

/// An app to process. Missing fields come from the store listing.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AppSpec {
    pub package_name: String,
    #[serde(default)]
    pub store_category: String,
    #[serde(default)]
    pub policy_url: Option<String>,
}

impl AppSpec {
    pub fn new(package_name: impl Into<String>) -> Self {
        AppSpec {
            package_name: package_name.into(),
            ..Default::default()
        }
    }
}

/// CSV with a `package_name` column and optional `store_category` and
/// `policy_url` columns.
pub fn load_app_list(path: &Path) -> Result<Vec<AppSpec>, OrchestratorError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<AppSpec>() {
        let mut spec = row.map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        spec.policy_url = spec.policy_url.filter(|u| !u.is_empty());
        out.push(spec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppOutcome {
    pub package_name: String,
    pub stages: Vec<(String, StageStatus)>,
    pub error: Option<String>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BatchSummary {
    pub outcomes: Vec<AppOutcome>,
}

impl BatchSummary {
    pub fn failures(&self) -> impl Iterator<Item = &AppOutcome> {
        self.outcomes.iter().filter(|o| o.error.is_some())
    }

    pub fn succeeded(&self) -> usize {
        self.outcomes.iter().filter(|o| o.error.is_none()).count()
    }

    /// 0 when every app succeeded, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.failures().next().is_some() {
            2
        } else {
            0
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for o in &self.outcomes {
            let ran = o.stages.iter().filter(|(_, s)| *s == StageStatus::Ran).count();
            let skipped = o.stages.len() - ran;
            match &o.error {
                None => out.push_str(&format!(
                    "ok      {} ({} ran, {} skipped, {} ms)\n",
                    o.package_name, ran, skipped, o.elapsed_ms
                )),
                Some(e) => out.push_str(&format!("FAILED  {}: {}\n", o.package_name, e)),
            }
        }
        out.push_str(&format!(
            "{} of {} apps succeeded\n",
            self.succeeded(),
            self.outcomes.len()
        ));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Scrape,
    FetchPolicy,
    Analyze,
}

struct AppRun<'a> {
    spec: &'a AppSpec,
    ws: AppWorkspace,
    stages: Vec<(String, StageStatus)>,
}

impl AppRun<'_> {
    fn record(&mut self, stage: &str, ran: bool) {
        self.stages.push((stage.to_string(), if ran { StageStatus::Ran } else { StageStatus::Skipped }));
    }
}

fn inputs(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn digest_or_missing(p: &Path) -> Result<String, OrchestratorError> {
    digest_file(p).ok_or_else(|| OrchestratorError::MissingArtifact(p.to_path_buf()))
}

/// Wires fetchers, renderer and model client from a config.
pub struct Orchestrator {
    config: PipelineConfig,
    fetcher: Arc<dyn PageFetcher>,
    renderer: Option<Arc<dyn Renderer>>,
    client: LlmClient,
    engine: &'static ConstraintEngine,
}

impl Orchestrator {
    /// Builds the live HTTP fetcher and configured provider.
    pub fn from_config(config: PipelineConfig) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let limiter = Arc::new(RateLimiter::new(config.fetch.rate_limit_interval));
        let http: Arc<dyn PageFetcher> =
            Arc::new(HttpFetcher::new(config.fetch.user_agent.clone(), limiter, config.fetch.timeout));
        let provider: Option<Arc<dyn ChatProvider>> = match config.provider.kind {
            ProviderKind::None => None,
            ProviderKind::Heuristic => Some(Arc::new(HeuristicProvider::new())),
            ProviderKind::OpenaiCompatible => Some(Arc::new(OpenAiCompatibleProvider::new(
                config.provider.endpoint.clone(),
                &config.provider.api_key_env,
                config.provider.timeout,
                config.provider.file_upload,
            ))),
        };
        Self::with_parts(config, http, provider)
    }

    /// `live_fetcher` is used only when no fixtures are configured and the
    /// transcript mode is not replay.
    pub fn with_parts(
        config: PipelineConfig,
        live_fetcher: Arc<dyn PageFetcher>,
        provider: Option<Arc<dyn ChatProvider>>,
    ) -> Result<Self, OrchestratorError> {
        config.validate()?;
        if config.transcript_mode != TranscriptMode::Replay && provider.is_none() {
            return Err(OrchestratorError::Config("live and record modes need a provider".into()));
        }
        let fetcher: Arc<dyn PageFetcher> = match (&config.fixtures_dir, config.transcript_mode) {
            (Some(dir), _) => Arc::new(
                FixtureFetcher::from_dir(dir)
                    .map_err(|e| OrchestratorError::Config(format!("fixtures {}: {e}", dir.display())))?,
            ),
            (None, TranscriptMode::Replay) => Arc::new(OfflineFetcher),
            (None, _) => live_fetcher,
        };
        let renderer: Option<Arc<dyn Renderer>> = match config.renderer {
            RendererKind::None => None,
            RendererKind::Text => Some(Arc::new(TextPdfRenderer)),
            RendererKind::External => Some(Arc::new(ExternalRenderer {
                command: config.fetch.renderer_command.clone().unwrap_or_default(),
            })),
        };
        let store = TranscriptStore::new(Some(config.transcript_path()), config.transcript_mode);
        let mut client = LlmClient::new(provider, store);
        if !config.llm_rate_limit_interval.is_zero() {
            client = client.with_limiter(Arc::new(RateLimiter::new(config.llm_rate_limit_interval)));
        }
        if config.attachment_mode == AttachmentMode::FileUpload && !client.supports_file_upload() {
            return Err(OrchestratorError::Config(
                "file_upload attachment mode but the provider does not accept files".into(),
            ));
        }
        Ok(Orchestrator {
            config,
            fetcher,
            renderer,
            client,
            engine: ConstraintEngine::bundled(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn client(&self) -> &LlmClient {
        &self.client
    }

    fn workspace(&self, pkg: &str) -> AppWorkspace {
        AppWorkspace::new(&self.config.workdir, pkg)
    }

    fn scrape(&self, run: &mut AppRun<'_>) -> Result<DssRecord, OrchestratorError> {
        let url = datasafety_url(&run.spec.package_name);
        let ins = inputs(&[("url", url), ("store_category", run.spec.store_category.clone())]);
        let path = run.ws.dss_path();
        if run.ws.is_fresh("scrape", &ins) {
            run.record("scrape", false);
            return Ok(crate::dss::load_dss_fixture(&path)?);
        }
        let app = AppRef {
            package_name: run.spec.package_name.clone(),
            store_category: run.spec.store_category.clone(),
            installs_floor: 0,
        };
        let record = fetch_dss(&app, self.fetcher.as_ref(), Some(&run.ws.raw_dir()))?;
        record.save(&path)?;
        run.ws.mark("scrape", ins, &[path])?;
        run.record("scrape", true);
        Ok(record)
    }

    fn load_dss(&self, run: &AppRun<'_>) -> Result<DssRecord, OrchestratorError> {
        let path = run.ws.dss_path();
        if !path.exists() {
            return Err(OrchestratorError::MissingArtifact(path));
        }
        Ok(crate::dss::load_dss_fixture(&path)?)
    }

    fn fetch_policy(&self, run: &mut AppRun<'_>, dss: &DssRecord) -> Result<PolicyDocument, OrchestratorError> {
        let url = run
            .spec
            .policy_url
            .clone()
            .or_else(|| dss.privacy_policy_url.clone())
            .ok_or_else(|| OrchestratorError::NoPolicyUrl(run.spec.package_name.clone()))?;
        let renderer = format!("{:?}", self.config.renderer);
        let ins = inputs(&[("url", url.clone()), ("renderer", renderer)]);
        if run.ws.is_fresh("fetch_policy", &ins) {
            run.record("fetch_policy", false);
            return Ok(PolicyDocument::load(&run.ws.policy_meta_path())?);
        }
        let require_pdf = self.config.attachment_mode == AttachmentMode::FileUpload;
        let doc = fetch_policy(
            &url,
            &run.spec.package_name,
            &self.config.fetch,
            self.fetcher.as_ref(),
            self.renderer.as_deref(),
            require_pdf,
            &run.ws,
        )?;
        let mut outputs = vec![run.ws.policy_meta_path(), run.ws.policy_text_path()];
        if let Some(p) = pdf_path(&doc, &run.ws) {
            outputs.push(p);
        }
        run.ws.mark("fetch_policy", ins, &outputs)?;
        run.record("fetch_policy", true);
        Ok(doc)
    }

    fn load_policy(&self, run: &AppRun<'_>) -> Result<PolicyDocument, OrchestratorError> {
        let p = run.ws.policy_meta_path();
        if !p.exists() {
            return Err(OrchestratorError::MissingArtifact(p));
        }
        Ok(PolicyDocument::load(&p)?)
    }

    fn settings_digest(&self, strategy: PromptStrategy) -> String {
        let mut s = self.config.stage_settings();
        s.scope_parallelism = 1;
        sha256_hex(format!("{}|{}", serde_json::to_string(&s).expect("settings serialize"), strategy).as_bytes())
    }

    /// Pre-processing, analysis and post-processing for both practices into
    /// `out_dir`, with markers namespaced by `label`.
    #[allow(clippy::too_many_arguments)]
    fn analyze_into(
        &self,
        run: &mut AppRun<'_>,
        dss: &DssRecord,
        doc: &PolicyDocument,
        out_dir: &Path,
        label: &str,
        run_id: u32,
        strategy: PromptStrategy,
    ) -> Result<Vec<AnalysisReport>, OrchestratorError> {
        let settings = self.config.stage_settings();
        let audit = run.ws.audit_dir();
        let ctx = StageContext {
            package_name: &run.spec.package_name,
            settings: &settings,
            audit_dir: Some(&audit),
            sample: run_id,
        };
        let fp = self.settings_digest(strategy);
        let policy_digest = digest_or_missing(&run.ws.policy_text_path())?;
        let pdf_file = pdf_path(doc, &run.ws);
        let pdf_bytes = match (&pdf_file, settings.attachment_mode) {
            (Some(p), AttachmentMode::FileUpload) => Some(fs::read(p)?),
            (None, AttachmentMode::FileUpload) => return Err(PipelineError::MissingPdf.into()),
            _ => None,
        };
        let dss_digest = digest_or_missing(&run.ws.dss_path())?;
        let mut app = dss.app.clone();
        if !run.spec.store_category.is_empty() {
            app.store_category = run.spec.store_category.clone();
        }
        let mut reports = Vec::new();
        for practice in PracticeKind::AUDITED {
            let pre_path = out_dir.join(format!("preprocessed_{practice}.txt"));
            let pre_stage = format!("{label}/preprocess_{practice}");
            let mut pre_in = vec![("policy", policy_digest.clone()), ("settings", fp.clone())];
            if let Some(b) = &pdf_bytes {
                pre_in.push(("pdf", sha256_hex(b)));
            }
            let pre_in = inputs(&pre_in);
            let extract = if run.ws.is_fresh(&pre_stage, &pre_in) {
                run.record(&pre_stage, false);
                StatementExtract::from_text(&fs::read_to_string(&pre_path)?, practice, doc)
            } else {
                let e = preprocess(doc, pdf_bytes.as_deref(), practice, &self.client, &ctx)?;
                write_atomic(&pre_path, e.to_text().as_bytes())?;
                run.ws.mark(&pre_stage, pre_in, std::slice::from_ref(&pre_path))?;
                run.record(&pre_stage, true);
                e
            };

            let findings_path = out_dir.join(format!("findings_{practice}.json"));
            let an_stage = format!("{label}/analyze_{practice}");
            let an_in = inputs(&[
                ("preprocessed", digest_or_missing(&pre_path)?),
                ("dss", dss_digest.clone()),
                ("settings", fp.clone()),
            ]);
            let merged = if run.ws.is_fresh(&an_stage, &an_in) {
                run.record(&an_stage, false);
                let f: FindingsFile = serde_json::from_str(&fs::read_to_string(&findings_path)?)
                    .map_err(|e| PipelineError::SchemaViolation(e.to_string()))?;
                f.merged()
            } else {
                let merged = analyze(strategy, practice, &extract, dss, self.engine, &self.client, &ctx)?;
                write_atomic(&findings_path, FindingsFile::new(&merged, practice, strategy).to_json().as_bytes())?;
                run.ws.mark(&an_stage, an_in, std::slice::from_ref(&findings_path))?;
                run.record(&an_stage, true);
                merged
            };

            let report_path = out_dir.join(format!("report_{practice}.json"));
            let readable_path = out_dir.join(format!("report_{practice}.md"));
            let post_stage = format!("{label}/postprocess_{practice}");
            let post_in = inputs(&[
                ("findings", digest_or_missing(&findings_path)?),
                ("policy", policy_digest.clone()),
                ("dss", dss_digest.clone()),
                ("settings", fp.clone()),
            ]);
            let report = if run.ws.is_fresh(&post_stage, &post_in) {
                run.record(&post_stage, false);
                let mut r = AnalysisReport::from_json(&fs::read_to_string(&report_path)?)?;
                r.app = app.clone();
                r
            } else {
                let input = PostprocessInput {
                    app: &app,
                    policy: doc,
                    run_id,
                    strategy,
                };
                let r = postprocess(&merged, practice, &self.client, self.engine, &input, &ctx)?;
                if r.omitted.len() + r.excluded.len() != merged.len() {
                    return Err(OrchestratorError::Conservation {
                        package: run.spec.package_name.clone(),
                        practice,
                        input: merged.len(),
                        output: r.omitted.len() + r.excluded.len(),
                    });
                }
                write_atomic(&report_path, r.to_json().as_bytes())?;
                write_atomic(&readable_path, app_report_markdown(&r).as_bytes())?;
                run.ws.mark(&post_stage, post_in, &[report_path.clone(), readable_path.clone()])?;
                run.record(&post_stage, true);
                r
            };
            reports.push(report);
        }
        Ok(reports)
    }

    fn process(&self, spec: &AppSpec, steps: &[Step]) -> AppOutcome {
        let started = Instant::now();
        let mut run = AppRun {
            spec,
            ws: self.workspace(&spec.package_name),
            stages: Vec::new(),
        };
        let result = (|| -> Result<(), OrchestratorError> {
            let dss = if steps.contains(&Step::Scrape) {
                self.scrape(&mut run)?
            } else {
                self.load_dss(&run)?
            };
            if !steps.contains(&Step::FetchPolicy) && !steps.contains(&Step::Analyze) {
                return Ok(());
            }
            let doc = if steps.contains(&Step::FetchPolicy) {
                self.fetch_policy(&mut run, &dss)?
            } else {
                self.load_policy(&run)?
            };
            if steps.contains(&Step::Analyze) {
                for k in 1..=self.config.runs {
                    let dir = run.ws.run_dir(k);
                    let label = format!("run-{k}");
                    self.analyze_into(&mut run, &dss, &doc, &dir, &label, k, self.config.prompt_strategy)?;
                }
            }
            Ok(())
        })();
        if let Err(e) = &result {
            warn!(package = %spec.package_name, "{e}");
        } else {
            info!(package = %spec.package_name, "done");
        }
        AppOutcome {
            package_name: spec.package_name.clone(),
            stages: run.stages,
            error: result.err().map(|e| e.to_string()),
            elapsed_ms: started.elapsed().as_millis() as u64,
        }
    }

    /// Bounded worker pool over apps; outcomes come back in input order.
    fn for_each_app<T: Send>(&self, apps: &[AppSpec], work: impl Fn(&AppSpec) -> T + Sync) -> Vec<T> {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..apps.len()).map(|_| None).collect());
        let workers = self.config.parallelism.min(apps.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(app) = apps.get(i) else { break };
                    let out = work(app);
                    slots.lock().unwrap()[i] = Some(out);
                });
            }
        });
        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|o| o.expect("every app processed"))
            .collect()
    }

    fn batch(&self, apps: &[AppSpec], steps: &[Step]) -> BatchSummary {
        BatchSummary {
            outcomes: self.for_each_app(apps, |a| self.process(a, steps)),
        }
    }

    pub fn cmd_scrape(&self, apps: &[AppSpec]) -> BatchSummary {
        self.batch(apps, &[Step::Scrape])
    }

    pub fn cmd_fetch_policy(&self, apps: &[AppSpec]) -> BatchSummary {
        self.batch(apps, &[Step::Scrape, Step::FetchPolicy])
    }

    /// Model stages only; needs `dss.json` and `policy.json` in place.
    pub fn cmd_analyze(&self, apps: &[AppSpec]) -> BatchSummary {
        self.batch(apps, &[Step::Analyze])
    }

    pub fn cmd_run_all(&self, apps: &[AppSpec]) -> BatchSummary {
        self.batch(apps, &[Step::Scrape, Step::FetchPolicy, Step::Analyze])
    }

    /// One full evaluation per strategy, each under
    /// `<pkg>/sweep-<strategy>/`.
    pub fn cmd_sweep(&self, apps: &[AppSpec], strategies: &[PromptStrategy], truth: &TruthSet) -> SweepTable {
        sweep(strategies, truth, |strategy| -> Result<Vec<AnalysisReport>, OrchestratorError> {
            let results = self.for_each_app(apps, |spec| {
                let mut run = AppRun {
                    spec,
                    ws: self.workspace(&spec.package_name),
                    stages: Vec::new(),
                };
                let dss = self.scrape(&mut run)?;
                let doc = self.fetch_policy(&mut run, &dss)?;
                let label = format!("sweep-{strategy}");
                let dir = run.ws.root().join(&label);
                self.analyze_into(&mut run, &dss, &doc, &dir, &label, 1, strategy)
            });
            let mut all = Vec::new();
            for r in results {
                all.extend(r?);
            }
            Ok(all)
        })
    }
}

fn package_dirs(workdir: &Path) -> Result<Vec<PathBuf>, OrchestratorError> {
    let mut dirs = Vec::new();
    for e in fs::read_dir(workdir)? {
        let p = e?.path();
        if p.is_dir() && (p.join("dss.json").exists() || p.join("stages.json").exists()) {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Reports keyed by run id.
pub type ReportsByRun = BTreeMap<u32, Vec<AnalysisReport>>;

/// Every `run-<k>/report_*.json` under a workdir, grouped by run, plus the
/// apps they belong to.
pub fn load_workdir_reports(workdir: &Path) -> Result<(ReportsByRun, Vec<AppRef>), OrchestratorError> {
    let mut by_run: BTreeMap<u32, Vec<AnalysisReport>> = BTreeMap::new();
    let mut apps = Vec::new();
    for dir in package_dirs(workdir)? {
        let pkg = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let app = match crate::dss::load_dss_fixture(&dir.join("dss.json")) {
            Ok(d) => AppRef {
                package_name: pkg.clone(),
                ..d.app
            },
            Err(_) => AppRef::new(pkg.clone()),
        };
        let mut runs: Vec<(u32, PathBuf)> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let k = p.file_name()?.to_str()?.strip_prefix("run-")?.parse().ok()?;
                Some((k, p))
            })
            .collect();
        runs.sort();
        for (k, run_dir) in runs {
            for practice in PracticeKind::AUDITED {
                let p = run_dir.join(format!("report_{practice}.json"));
                if !p.exists() {
                    continue;
                }
                let mut r = AnalysisReport::from_json(&fs::read_to_string(&p)?)?;
                r.app = app.clone();
                by_run.entry(k).or_default().push(r);
            }
        }
        apps.push(app);
    }
    Ok((by_run, apps))
}

/// Scores every run in the workdir; writes `metrics.json` and
/// `metrics.md` into `out_dir`.
pub fn cmd_evaluate(workdir: &Path, truth_file: &Path, out_dir: &Path) -> Result<EvaluationReport, OrchestratorError> {
    let truth = TruthSet::load(truth_file)?;
    let (by_run, _) = load_workdir_reports(workdir)?;
    let report = evaluate_runs(&by_run, &truth)?;
    write_atomic(&out_dir.join("metrics.json"), report.to_json().as_bytes())?;
    write_atomic(&out_dir.join("metrics.md"), report.to_markdown().as_bytes())?;
    Ok(report)
}

/// Where `cmd_report` reads results from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReportSource {
    /// A pipeline workdir; one run is summarized (default: the lowest).
    Workdir { path: PathBuf, run: Option<u32> },
    /// Released per-app result files.
    Replication(PathBuf),
}

pub fn cmd_report(source: &ReportSource, out_dir: &Path) -> Result<CorpusSummary, OrchestratorError> {
    let (reports, apps) = match source {
        ReportSource::Workdir { path, run } => {
            let (mut by_run, apps) = load_workdir_reports(path)?;
            let k = run.or_else(|| by_run.keys().next().copied());
            (k.and_then(|k| by_run.remove(&k)).unwrap_or_default(), apps)
        }
        ReportSource::Replication(dir) => load_replication_dir(dir)?,
    };
    let summary = summarize(&reports, &apps)?;
    emit(&summary, out_dir, &[EmitFormat::Structured, EmitFormat::Tabular, EmitFormat::Readable])?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_and_flags() {
        let c = PipelineConfig::from_toml("runs = 3\nprompt_strategy = \"per-category\"\n[fetch]\nrate_limit_interval_ms = 1000\n").unwrap();
        assert_eq!(c.runs, 3);
        assert_eq!(c.prompt_strategy, PromptStrategy::PerCategory);
        assert_eq!(c.fetch.rate_limit_interval, Duration::from_secs(1));
        assert!(matches!(PipelineConfig::from_toml("runs = 0"), Err(OrchestratorError::Config(_))));
        let live = PipelineConfig::from_toml("transcript_mode = \"live\"").unwrap();
        assert!(matches!(Orchestrator::from_config(live), Err(OrchestratorError::Config(_))));
        assert!(matches!(PipelineConfig::from_toml("bogus = 1"), Err(OrchestratorError::Config(_))));
    }

    #[test]
    fn batch_exit_codes() {
        let ok = AppOutcome { package_name: "a.b".into(), stages: vec![], error: None, elapsed_ms: 0 };
        let mut s = BatchSummary { outcomes: vec![ok.clone()] };
        assert_eq!(s.exit_code(), 0);
        s.outcomes.push(AppOutcome { error: Some("x".into()), ..ok });
        assert_eq!(s.exit_code(), 2);
    }
}
