use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dsscheck::eval::TruthSet;
use dsscheck::llm::TranscriptMode;
use dsscheck::orchestrator::{
    cmd_evaluate, cmd_report, load_app_list, AppSpec, BatchSummary, Orchestrator, OrchestratorError,
    PipelineConfig, ProviderKind, RendererKind, ReportSource,
};
use dsscheck::pipeline::AttachmentMode;
use dsscheck::reporting::top_data_types;
use dsscheck::taxonomy::{PracticeKind, PromptStrategy};

/// Find data practices that a privacy policy describes but the Google Play
/// Data safety section leaves out.
#[derive(Parser, Debug)]
#[command(name = "dsscheck", version)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<String>,
    /// inline | file_upload
    #[arg(long, global = true)]
    attachment_mode: Option<AttachmentMode>,
    /// 1, 3, 14 or 38 (or single, three-groups, per-category, per-type)
    #[arg(long, global = true)]
    strategy: Option<PromptStrategy>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// live | record | replay
    #[arg(long, global = true)]
    transcript_mode: Option<TranscriptMode>,
    #[arg(long, global = true)]
    transcript_dir: Option<PathBuf>,
    /// Directory of captured payloads to serve instead of the network.
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    #[arg(long, global = true)]
    runs: Option<u32>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Minimum gap between web requests.
    #[arg(long, global = true)]
    rate_limit_ms: Option<u64>,
    /// Minimum gap between model requests.
    #[arg(long, global = true)]
    llm_rate_limit_ms: Option<u64>,
    #[arg(long, global = true)]
    settle_wait_ms: Option<u64>,
    #[arg(long, global = true)]
    user_agent: Option<String>,
    /// One request every 357 seconds.
    #[arg(long, global = true)]
    polite: bool,
    /// none | heuristic | openai_compatible
    #[arg(long, global = true, value_parser = parse_provider)]
    provider: Option<ProviderKind>,
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// none | text | external
    #[arg(long, global = true, value_parser = parse_renderer)]
    renderer: Option<RendererKind>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn parse_provider(s: &str) -> Result<ProviderKind, String> {
    match s {
        "none" => Ok(ProviderKind::None),
        "heuristic" => Ok(ProviderKind::Heuristic),
        "openai_compatible" | "openai-compatible" => Ok(ProviderKind::OpenaiCompatible),
        other => Err(format!("unknown provider `{other}`")),
    }
}

fn parse_renderer(s: &str) -> Result<RendererKind, String> {
    match s {
        "none" => Ok(RendererKind::None),
        "text" => Ok(RendererKind::Text),
        "external" => Ok(RendererKind::External),
        other => Err(format!("unknown renderer `{other}`")),
    }
}

#[derive(Args, Debug)]
struct AppArgs {
    /// Package names, e.g. com.example.app
    packages: Vec<String>,
    /// CSV with package_name[,store_category][,policy_url]
    #[arg(long)]
    apps: Option<PathBuf>,
    /// Store category for the packages given on the command line.
    #[arg(long)]
    category: Option<String>,
    /// Policy URL override (single package only).
    #[arg(long)]
    policy_url: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fetch and parse Data safety sections.
    Scrape(AppArgs),
    /// Fetch, clean and render privacy policies.
    FetchPolicy(AppArgs),
    /// Run pre-processing, analysis and post-processing.
    Analyze(AppArgs),
    /// Every stage, in order, resuming where possible.
    RunAll(AppArgs),
    /// Score reports in the workdir against ground truth.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus summary, top data types and heat maps.
    Report {
        /// Read released per-app result files instead of the workdir.
        #[arg(long)]
        replication: Option<PathBuf>,
        #[arg(long)]
        run: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare prompt strategies against ground truth.
    Sweep {
        #[arg(long)]
        truth: PathBuf,
        /// Comma-separated: 1,3,14,38
        #[arg(long, value_delimiter = ',', default_value = "1,3,14,38")]
        strategies: Vec<PromptStrategy>,
        #[command(flatten)]
        apps: AppArgs,
    },
}

fn build_config(a: &ConfigArgs) -> Result<PipelineConfig> {
    let mut c = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if a.polite {
        c.fetch.rate_limit_interval = dsscheck::fetch::RateLimiter::POLITE_INTERVAL;
    }
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(c.workdir, a.workdir);
    set!(c.model_id, a.model);
    set!(c.attachment_mode, a.attachment_mode);
    set!(c.prompt_strategy, a.strategy);
    set!(c.temperature, a.temperature);
    set!(c.transcript_mode, a.transcript_mode);
    set!(c.runs, a.runs);
    set!(c.parallelism, a.parallelism);
    set!(c.fetch.user_agent, a.user_agent);
    set!(c.provider.kind, a.provider);
    set!(c.provider.endpoint, a.endpoint);
    set!(c.renderer, a.renderer);
    if a.transcript_dir.is_some() {
        c.transcript_dir = a.transcript_dir.clone();
    }
    if a.fixtures.is_some() {
        c.fixtures_dir = a.fixtures.clone();
    }
    if let Some(ms) = a.rate_limit_ms {
        c.fetch.rate_limit_interval = Duration::from_millis(ms);
    }
    if let Some(ms) = a.llm_rate_limit_ms {
        c.llm_rate_limit_interval = Duration::from_millis(ms);
    }
    if let Some(ms) = a.settle_wait_ms {
        c.fetch.settle_wait = Duration::from_millis(ms);
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn app_specs(a: &AppArgs) -> Result<Vec<AppSpec>> {
    let mut specs = match &a.apps {
        Some(p) => load_app_list(p)?,
        None => Vec::new(),
    };
    for p in &a.packages {
        specs.push(AppSpec {
            package_name: p.clone(),
            store_category: a.category.clone().unwrap_or_default(),
            policy_url: None,
        });
    }
    if let Some(url) = &a.policy_url {
        if specs.len() != 1 {
            return Err(UsageError("--policy-url needs exactly one package".into()).into());
        }
        specs[0].policy_url = Some(url.clone());
    }
    if specs.is_empty() {
        return Err(UsageError("no packages given (positional names or --apps)".into()).into());
    }
    Ok(specs)
}

fn batch_exit(summary: &BatchSummary) -> u8 {
    eprint!("{}", summary.render());
    summary.exit_code() as u8
}

fn run(cli: Cli) -> Result<u8> {
    let config = build_config(&cli.config)?;
    match &cli.command {
        Command::Scrape(a) | Command::FetchPolicy(a) | Command::Analyze(a) | Command::RunAll(a) => {
            let apps = app_specs(a)?;
            let orch = Orchestrator::from_config(config)?;
            let summary = match &cli.command {
                Command::Scrape(_) => orch.cmd_scrape(&apps),
                Command::FetchPolicy(_) => orch.cmd_fetch_policy(&apps),
                Command::Analyze(_) => orch.cmd_analyze(&apps),
                _ => orch.cmd_run_all(&apps),
            };
            Ok(batch_exit(&summary))
        }
        Command::Evaluate { truth, out } => {
            let out = out.clone().unwrap_or_else(|| config.workdir.clone());
            let report = cmd_evaluate(&config.workdir, truth, &out)?;
            print!("{}", report.to_markdown());
            Ok(0)
        }
        Command::Report { replication, run, out } => {
            let source = match replication {
                Some(dir) => ReportSource::Replication(dir.clone()),
                None => ReportSource::Workdir {
                    path: config.workdir.clone(),
                    run: *run,
                },
            };
            let out = out.clone().unwrap_or_else(|| config.workdir.join("summary"));
            let s = cmd_report(&source, &out)?;
            println!(
                "total {} (collection {}, sharing {}) across {} apps",
                s.total_omitted,
                s.practice_total(PracticeKind::Collection),
                s.practice_total(PracticeKind::Sharing),
                s.app_count
            );
            for (t, n) in top_data_types(&s, 10) {
                println!("  {:<32} {n}", t.name());
            }
            println!("written to {}", out.display());
            Ok(0)
        }
        Command::Sweep { truth, strategies, apps } => {
            let apps = app_specs(apps)?;
            let truth = TruthSet::load(truth).with_context(|| format!("loading {}", truth.display()))?;
            let orch = Orchestrator::from_config(config)?;
            let table = orch.cmd_sweep(&apps, strategies, &truth);
            let out = orch.config().workdir.join("sweep.json");
            std::fs::write(&out, table.to_json())?;
            print!("{}", table.to_markdown());
            let failed = table
                .columns
                .iter()
                .any(|c| matches!(c.outcome, dsscheck::eval::SweepOutcome::Failed { .. }));
            Ok(if failed { 2 } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.config.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.downcast_ref::<UsageError>().is_some()
                || e
                    .downcast_ref::<OrchestratorError>()
                    .is_some_and(|o| matches!(o, OrchestratorError::Config(_)));
            ExitCode::from(if config_error { 1 } else { 2 })
        }
    }
}
