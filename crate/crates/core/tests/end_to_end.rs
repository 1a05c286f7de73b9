mod common;

use std::path::Path;
use std::sync::Arc;

use common::*;
use dsscheck::eval::{ConfusionCounts, EvalError, TruthSet};
use dsscheck::heuristic::HeuristicProvider;
use dsscheck::llm::TranscriptMode;
use dsscheck::orchestrator::{
    cmd_evaluate, cmd_report, load_workdir_reports, Orchestrator, OrchestratorError, PipelineConfig, ReportSource,
    StageStatus,
};
use dsscheck::taxonomy::PracticeKind;

fn config(root: &Path, workdir: &str, mode: TranscriptMode) -> PipelineConfig {
    PipelineConfig {
        workdir: root.join(workdir),
        transcript_dir: Some(root.join("transcripts")),
        fixtures_dir: Some(root.join("captures")),
        transcript_mode: mode,
        ..PipelineConfig::default()
    }
}

fn record(root: &Path, workdir: &str, runs: u32) -> Vec<dsscheck::orchestrator::AppSpec> {
    let apps = build_captures(&root.join("captures"));
    let provider = Arc::new(CountingProvider::new(Arc::new(HeuristicProvider::new())));
    let mut cfg = config(root, workdir, TranscriptMode::Record);
    cfg.runs = runs;
    let orch = Orchestrator::with_parts(cfg, Arc::new(CountingFetcher::default()), Some(provider.clone())).unwrap();
    let summary = orch.cmd_run_all(&apps);
    assert_eq!(summary.exit_code(), 0, "{}", summary.render());
    assert!(provider.count() > 0);
    apps
}

#[test]
fn replay_is_offline_and_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let apps = record(tmp.path(), "recorded", 1);

    let mut trees = Vec::new();
    for name in ["replay-a", "replay-b"] {
        let net = Arc::new(CountingFetcher::default());
        let provider = Arc::new(CountingProvider::new(Arc::new(HeuristicProvider::new())));
        let orch = Orchestrator::with_parts(
            config(tmp.path(), name, TranscriptMode::Replay),
            net.clone(),
            Some(provider.clone()),
        )
        .unwrap();
        let summary = orch.cmd_run_all(&apps);
        assert_eq!(summary.exit_code(), 0, "{}", summary.render());
        assert_eq!(net.0.load(std::sync::atomic::Ordering::SeqCst), 0);
        assert_eq!(provider.count(), 0);
        trees.push(tree_bytes(&tmp.path().join(name)));
    }
    assert!(!trees[0].is_empty());
    assert_eq!(trees[0], trees[1]);

    // reports match what the recording run produced
    let recorded = tree_bytes(&tmp.path().join("recorded"));
    for (path, bytes) in &trees[0] {
        if path.to_string_lossy().contains("report_") {
            assert_eq!(recorded.get(path), Some(bytes), "{}", path.display());
        }
    }
}

#[test]
fn replay_without_fixtures_or_transcripts_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let apps = build_captures(&tmp.path().join("captures"));
    let orch = Orchestrator::with_parts(
        config(tmp.path(), "w", TranscriptMode::Replay),
        Arc::new(CountingFetcher::default()),
        None,
    )
    .unwrap();
    let summary = orch.cmd_run_all(&apps);
    assert_eq!(summary.exit_code(), 2);
    assert_eq!(summary.failures().count(), apps.len());
    assert!(summary.render().contains("FAILED"));
}

#[test]
fn second_run_resumes_and_stale_stages_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let apps = record(tmp.path(), "w", 1);
    let orch = Orchestrator::with_parts(
        config(tmp.path(), "w", TranscriptMode::Replay),
        Arc::new(CountingFetcher::default()),
        None,
    )
    .unwrap();
    let again = orch.cmd_run_all(&apps);
    assert_eq!(again.exit_code(), 0);
    for o in &again.outcomes {
        assert!(o.stages.iter().all(|(_, s)| *s == StageStatus::Skipped), "{:?}", o.stages);
        assert_eq!(o.stages.len(), 2 + 3 * 2);
    }

    // tampering with one report makes only that stage stale
    let report = tmp.path().join("w/com.example.notes/run-1/report_sharing.json");
    std::fs::write(&report, "{}").unwrap();
    let third = orch.cmd_run_all(&apps);
    assert_eq!(third.exit_code(), 0);
    let notes = third.outcomes.iter().find(|o| o.package_name == "com.example.notes").unwrap();
    let ran: Vec<&str> = notes
        .stages
        .iter()
        .filter(|(_, s)| *s == StageStatus::Ran)
        .map(|(n, _)| n.as_str())
        .collect();
    assert_eq!(ran, ["run-1/postprocess_sharing"]);
    assert!(std::fs::read_to_string(&report).unwrap().contains("omitted_declarations"));
}

#[test]
fn evaluation_over_three_runs() {
    let tmp = tempfile::tempdir().unwrap();
    record(tmp.path(), "w", 3);
    let (by_run, apps) = load_workdir_reports(&tmp.path().join("w")).unwrap();
    assert_eq!(by_run.keys().copied().collect::<Vec<_>>(), [1, 2, 3]);
    assert_eq!(apps.len(), 3);
    let report = cmd_evaluate(&tmp.path().join("w"), &fixtures().join("truth.csv"), tmp.path()).unwrap();
    assert_eq!(report.runs.len(), 3);
    // tallied by hand from the fixture policies and truth labels
    let expected = ConfusionCounts::new(11.0, 2.0, 2.0, 1.0);
    for r in &report.runs {
        assert_eq!(r.counts, expected);
    }
    let averaged = report.averaged.as_ref().unwrap();
    let precision = &averaged.precision;
    assert!((precision.mean - 11.0 / 13.0).abs() < 1e-9);
    assert_eq!(precision.std, 0.0);
    assert!((report.pooled.metrics.recall.unwrap() - 11.0 / 12.0).abs() < 1e-9);
    assert!(tmp.path().join("metrics.json").exists());
    assert!(tmp.path().join("metrics.md").exists());
}

#[test]
fn evaluation_needs_truth_for_every_app() {
    let tmp = tempfile::tempdir().unwrap();
    record(tmp.path(), "w", 1);
    let partial: String = std::fs::read_to_string(fixtures().join("truth.csv"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with("com.example.fitness"))
        .map(|l| format!("{l}\n"))
        .collect();
    let truth_file = tmp.path().join("partial.csv");
    std::fs::write(&truth_file, partial).unwrap();
    let err = cmd_evaluate(&tmp.path().join("w"), &truth_file, tmp.path()).unwrap_err();
    assert!(
        matches!(&err, OrchestratorError::Eval(EvalError::MissingTruth(p)) if p == "com.example.fitness"),
        "{err}"
    );
    assert!(TruthSet::load(&truth_file).unwrap().covers("com.example.notes"));
}

#[test]
fn report_from_workdir() {
    let tmp = tempfile::tempdir().unwrap();
    record(tmp.path(), "w", 1);
    let out = tmp.path().join("summary");
    let s = cmd_report(
        &ReportSource::Workdir {
            path: tmp.path().join("w"),
            run: None,
        },
        &out,
    )
    .unwrap();
    assert_eq!(s.app_count, 3);
    assert_eq!(s.total_omitted, 13);
    assert_eq!(s.practice_total(PracticeKind::Collection), 8);
    assert_eq!(s.practice_total(PracticeKind::Sharing), 5);
    for f in ["summary.json", "summary.md", "top_data_types.csv", "heatmap_collection.csv", "heatmap_sharing.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}
