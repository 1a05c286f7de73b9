//! Scoring reports against hand-labelled ground truth.
//!
//! Matching is per app on `(practice, resolved data type)`; the policy
//! excerpt is evidence only. Several omitted findings with the same data type
//! count once.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::AnalysisReport;
use crate::taxonomy::{resolve_data_type, DataTypeId, PracticeKind, PromptStrategy};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground truth has no labels for app `{0}`")]
    MissingTruth(String),
    #[error("ground truth line {line}: {message}")]
    InvalidTruth { line: usize, message: String },
    #[error("duplicate ground-truth label for ({package}, {practice}, {data_type})")]
    DuplicateLabel {
        package: String,
        practice: PracticeKind,
        data_type: DataTypeId,
    },
    #[error("no runs to aggregate")]
    NoRuns,
    #[error("{0} is undefined in every run")]
    AllUndefined(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthVerdict {
    Omission,
    Compliant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub package_name: String,
    pub practice: PracticeKind,
    pub data_type: DataTypeId,
    pub verdict: TruthVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_note: Option<String>,
}

type LabelKey = (String, PracticeKind, DataTypeId);

/// Validated label set: at most one label per (app, practice, data type).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TruthSet {
    labels: BTreeMap<LabelKey, GroundTruthLabel>,
}

#[derive(Debug, Deserialize)]
struct TruthRow {
    package_name: String,
    practice: String,
    data_type: String,
    verdict: String,
    #[serde(default)]
    annotator_note: Option<String>,
}

impl TruthSet {
    pub fn new(labels: impl IntoIterator<Item = GroundTruthLabel>) -> Result<Self, EvalError> {
        let mut set = TruthSet::default();
        for l in labels {
            set.insert(l)?;
        }
        Ok(set)
    }

    fn insert(&mut self, l: GroundTruthLabel) -> Result<(), EvalError> {
        let key = (l.package_name.clone(), l.practice, l.data_type);
        if self.labels.contains_key(&key) {
            return Err(EvalError::DuplicateLabel {
                package: key.0,
                practice: key.1,
                data_type: key.2,
            });
        }
        self.labels.insert(key, l);
        Ok(())
    }

    /// CSV with header `package_name,practice,data_type,verdict,annotator_note`.
    /// `data_type` accepts a taxonomy key or display name.
    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut set = TruthSet::default();
        for (i, row) in rdr.deserialize::<TruthRow>().enumerate() {
            let line = i + 2;
            let bad = |message: String| EvalError::InvalidTruth { line, message };
            let row = row.map_err(|e| bad(e.to_string()))?;
            let practice = match row.practice.to_lowercase().as_str() {
                "collection" => PracticeKind::Collection,
                "sharing" => PracticeKind::Sharing,
                other => return Err(bad(format!("unknown practice `{other}`"))),
            };
            let data_type = DataTypeId::from_key(&row.data_type)
                .or_else(|| resolve_data_type(&row.data_type, None))
                .ok_or_else(|| bad(format!("unknown data type `{}`", row.data_type)))?;
            let verdict = match row.verdict.to_lowercase().as_str() {
                "omission" => TruthVerdict::Omission,
                "compliant" => TruthVerdict::Compliant,
                other => return Err(bad(format!("verdict must be omission or compliant, got `{other}`"))),
            };
            if row.package_name.is_empty() {
                return Err(bad("empty package_name".into()));
            }
            set.insert(GroundTruthLabel {
                package_name: row.package_name,
                practice,
                data_type,
                verdict,
                annotator_note: row.annotator_note.filter(|n| !n.is_empty()),
            })?;
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["package_name", "practice", "data_type", "verdict", "annotator_note"])
            .expect("in-memory write");
        for l in self.labels.values() {
            let verdict = match l.verdict {
                TruthVerdict::Omission => "omission",
                TruthVerdict::Compliant => "compliant",
            };
            w.write_record([
                l.package_name.as_str(),
                l.practice.as_str(),
                l.data_type.key(),
                verdict,
                l.annotator_note.as_deref().unwrap_or(""),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn covers(&self, package: &str) -> bool {
        self.labels.keys().any(|(p, _, _)| p == package)
    }

    pub fn packages(&self) -> BTreeSet<&str> {
        self.labels.keys().map(|(p, _, _)| p.as_str()).collect()
    }

    pub fn get(&self, package: &str, practice: PracticeKind, t: DataTypeId) -> Option<TruthVerdict> {
        self.labels
            .get(&(package.to_string(), practice, t))
            .map(|l| l.verdict)
    }

    pub fn omissions(&self, package: &str, practice: PracticeKind) -> BTreeSet<DataTypeId> {
        self.labels
            .values()
            .filter(|l| l.package_name == package && l.practice == practice && l.verdict == TruthVerdict::Omission)
            .map(|l| l.data_type)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: f64,
    pub fp: f64,
    pub tn: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
}

impl ConfusionCounts {
    pub fn new(tp: f64, fp: f64, tn: f64, fn_: f64) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> f64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

/// Key-level outcome of one report against truth.
///
/// Omitted data types: TP if truth says omission, FP otherwise. Excluded
/// data types not also omitted: FN if truth says omission, TN otherwise.
/// Truth omissions the report never mentions: FN.
pub fn classify_outcomes(report: &AnalysisReport, truth: &TruthSet) -> Result<ConfusionCounts, EvalError> {
    let pkg = report.app.package_name.as_str();
    if !truth.covers(pkg) {
        return Err(EvalError::MissingTruth(pkg.to_string()));
    }
    let practice = report.practice;
    let flagged: BTreeSet<DataTypeId> = report.omitted.iter().filter_map(|f| f.data_type).collect();
    let unresolved = report.omitted.iter().filter(|f| f.data_type.is_none()).count();
    let excluded: BTreeSet<DataTypeId> = report
        .excluded
        .iter()
        .filter_map(|x| x.finding.data_type)
        .filter(|t| !flagged.contains(t))
        .collect();
    let truth_omissions = truth.omissions(pkg, practice);
    let mut c = ConfusionCounts::default();
    // unresolved omitted findings cannot match a truth label
    c.fp += unresolved as f64;
    for t in &flagged {
        if truth_omissions.contains(t) {
            c.tp += 1.0;
        } else {
            c.fp += 1.0;
        }
    }
    for t in &excluded {
        if truth_omissions.contains(t) {
            c.fn_ += 1.0;
        } else {
            c.tn += 1.0;
        }
    }
    c.fn_ += truth_omissions
        .iter()
        .filter(|t| !flagged.contains(t) && !excluded.contains(t))
        .count() as f64;
    Ok(c)
}

/// A metric value; `None` is the undefined marker (zero denominator).
pub type Metric = Option<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub precision: Metric,
    pub accuracy: Metric,
    pub recall: Metric,
    pub f1: Metric,
}

fn ratio(num: f64, den: f64) -> Metric {
    (den > 0.0).then(|| num / den)
}

pub fn metrics(c: &ConfusionCounts) -> RunMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    RunMetrics {
        precision,
        accuracy: ratio(c.tp + c.tn, c.total()),
        recall,
        f1,
    }
}

impl RunMetrics {
    pub fn get(&self, name: &str) -> Metric {
        match name {
            "precision" => self.precision,
            "accuracy" => self.accuracy,
            "recall" => self.recall,
            "f1" => self.f1,
            _ => None,
        }
    }
}

pub const METRIC_NAMES: [&str; 4] = ["precision", "accuracy", "recall", "f1"];

pub fn fmt_metric(m: Metric) -> String {
    m.map_or_else(|| "undefined".to_string(), |v| format!("{v:.3}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single defined run.
    pub std: f64,
    pub defined_runs: usize,
    pub undefined_runs: usize,
}

impl fmt::Display for MetricStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)?;
        if self.undefined_runs > 0 {
            write!(f, " ({} undefined)", self.undefined_runs)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub run_count: usize,
    pub precision: MetricStat,
    pub accuracy: MetricStat,
    pub recall: MetricStat,
    pub f1: MetricStat,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Per-metric mean and sample std over the runs where the metric is
/// defined.
pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<AggregateMetrics, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let stat = |name: &'static str| -> Result<MetricStat, EvalError> {
        let vals: Vec<f64> = runs.iter().filter_map(|r| r.get(name)).collect();
        if vals.is_empty() {
            return Err(EvalError::AllUndefined(name));
        }
        let (mean, std) = mean_std(&vals);
        Ok(MetricStat {
            mean,
            std,
            defined_runs: vals.len(),
            undefined_runs: runs.len() - vals.len(),
        })
    };
    Ok(AggregateMetrics {
        run_count: runs.len(),
        precision: stat("precision")?,
        accuracy: stat("accuracy")?,
        recall: stat("recall")?,
        f1: stat("f1")?,
    })
}

/// Element-wise mean of per-run counts.
pub fn aggregate_counts(runs: &[ConfusionCounts]) -> Result<ConfusionCounts, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let n = runs.len() as f64;
    let mut sum = ConfusionCounts::default();
    for r in runs {
        sum += *r;
    }
    Ok(ConfusionCounts::new(sum.tp / n, sum.fp / n, sum.tn / n, sum.fn_ / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub run_id: u32,
    pub counts: ConfusionCounts,
    pub metrics: RunMetrics,
    pub report_count: usize,
}

/// Metrics of the element-wise mean counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEvaluation {
    pub mean_counts: ConfusionCounts,
    pub count_std: ConfusionCounts,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub runs: Vec<RunEvaluation>,
    /// Metrics recomputed from mean counts across runs.
    pub pooled: PooledEvaluation,
    /// Mean ± sample std of per-run metrics.
    pub averaged: Option<AggregateMetrics>,
    pub warnings: Vec<String>,
}

/// Scores every run. `reports` maps run id to that run's reports.
pub fn evaluate_runs(
    reports: &BTreeMap<u32, Vec<AnalysisReport>>,
    truth: &TruthSet,
) -> Result<EvaluationReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let mut warnings = Vec::new();
    let mut runs = Vec::new();
    for (&run_id, rs) in reports {
        let mut counts = ConfusionCounts::default();
        for r in rs {
            counts += classify_outcomes(r, truth)?;
        }
        let seen: BTreeSet<(&str, PracticeKind)> =
            rs.iter().map(|r| (r.app.package_name.as_str(), r.practice)).collect();
        let reported_pkgs: BTreeSet<&str> = seen.iter().map(|(p, _)| *p).collect();
        for pkg in truth.packages().into_iter().filter(|p| reported_pkgs.contains(p)) {
            for practice in PracticeKind::AUDITED {
                if !seen.contains(&(pkg, practice)) && !truth.omissions(pkg, practice).is_empty() {
                    warnings.push(format!("run {run_id}: no {practice} report for {pkg}; its truth omissions are not scored"));
                }
            }
        }
        runs.push(RunEvaluation {
            run_id,
            metrics: metrics(&counts),
            counts,
            report_count: rs.len(),
        });
    }
    let counts: Vec<ConfusionCounts> = runs.iter().map(|r| r.counts).collect();
    let mean_counts = aggregate_counts(&counts)?;
    let col = |f: fn(&ConfusionCounts) -> f64| mean_std(&counts.iter().map(f).collect::<Vec<_>>()).1;
    let count_std = ConfusionCounts::new(col(|c| c.tp), col(|c| c.fp), col(|c| c.tn), col(|c| c.fn_));
    let per_run: Vec<RunMetrics> = runs.iter().map(|r| r.metrics).collect();
    let averaged = match aggregate_runs(&per_run) {
        Ok(a) => Some(a),
        Err(EvalError::AllUndefined(m)) => {
            warnings.push(format!("{m} undefined in every run; averaged metrics omitted"));
            None
        }
        Err(e) => return Err(e),
    };
    Ok(EvaluationReport {
        schema_version: METRICS_SCHEMA_VERSION,
        runs,
        pooled: PooledEvaluation {
            metrics: metrics(&mean_counts),
            mean_counts,
            count_std,
        },
        averaged,
        warnings,
    })
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("## Per-run results\n\n| Run | TP | FP | TN | FN | Precision | Accuracy | Recall | F1 |\n|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.runs {
            let m = &r.metrics;
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                r.run_id,
                r.counts.tp,
                r.counts.fp,
                r.counts.tn,
                r.counts.fn_,
                fmt_metric(m.precision),
                fmt_metric(m.accuracy),
                fmt_metric(m.recall),
                fmt_metric(m.f1)
            ));
        }
        let p = &self.pooled;
        out.push_str(&format!(
            "\n## Pooled (metrics of mean counts)\n\n| Metric | Value |\n|---|---|\n| TP | {:.1} ± {:.1} |\n| FP | {:.1} ± {:.1} |\n| TN | {:.1} ± {:.1} |\n| FN | {:.1} ± {:.1} |\n",
            p.mean_counts.tp, p.count_std.tp, p.mean_counts.fp, p.count_std.fp,
            p.mean_counts.tn, p.count_std.tn, p.mean_counts.fn_, p.count_std.fn_
        ));
        for name in METRIC_NAMES {
            out.push_str(&format!("| {} | {} |\n", name, fmt_metric(p.metrics.get(name))));
        }
        out.push_str("\n## Averaged (mean ± std of per-run metrics)\n\n");
        match &self.averaged {
            Some(a) => {
                out.push_str("| Metric | Value |\n|---|---|\n");
                for (name, s) in [("precision", a.precision), ("accuracy", a.accuracy), ("recall", a.recall), ("f1", a.f1)] {
                    out.push_str(&format!("| {name} | {s} |\n"));
                }
            }
            None => out.push_str("undefined\n"),
        }
        for w in &self.warnings {
            out.push_str(&format!("\nwarning: {w}"));
        }
        if !self.warnings.is_empty() {
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SweepOutcome {
    Ok { counts: ConfusionCounts, metrics: RunMetrics },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepColumn {
    pub strategy: PromptStrategy,
    pub outcome: SweepOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub columns: Vec<SweepColumn>,
}

/// Evaluates each strategy in turn. `run` produces the reports for one
/// strategy; a failing strategy is marked and the others still run.
pub fn sweep<E: fmt::Display>(
    strategies: &[PromptStrategy],
    truth: &TruthSet,
    mut run: impl FnMut(PromptStrategy) -> Result<Vec<AnalysisReport>, E>,
) -> SweepTable {
    let columns = strategies
        .iter()
        .map(|&strategy| {
            let outcome = match run(strategy) {
                Ok(reports) => {
                    let mut counts = ConfusionCounts::default();
                    let mut err = None;
                    for r in &reports {
                        match classify_outcomes(r, truth) {
                            Ok(c) => counts += c,
                            Err(e) => {
                                err = Some(e.to_string());
                                break;
                            }
                        }
                    }
                    match err {
                        Some(error) => SweepOutcome::Failed { error: format!("{strategy}: {error}") },
                        None => SweepOutcome::Ok {
                            metrics: metrics(&counts),
                            counts,
                        },
                    }
                }
                Err(e) => SweepOutcome::Failed { error: format!("{strategy}: {e}") },
            };
            SweepColumn { strategy, outcome }
        })
        .collect();
    SweepTable { columns }
}

impl SweepTable {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("sweep serializes");
        s.push('\n');
        s
    }

    /// Metrics as rows, strategies as columns.
    pub fn to_markdown(&self) -> String {
        if self.columns.is_empty() {
            return "(no strategies)\n".to_string();
        }
        let mut out = String::from("| Metric |");
        for c in &self.columns {
            out.push_str(&format!(" {} prompt(s) |", c.strategy.prompt_count()));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.columns.len()));
        out.push('\n');
        for name in METRIC_NAMES {
            out.push_str(&format!("| {name} |"));
            for c in &self.columns {
                let cell = match &c.outcome {
                    SweepOutcome::Ok { metrics, .. } => fmt_metric(metrics.get(name)),
                    SweepOutcome::Failed { .. } => "failed".to_string(),
                };
                out.push_str(&format!(" {cell} |"));
            }
            out.push('\n');
        }
        for c in &self.columns {
            if let SweepOutcome::Failed { error } = &c.outcome {
                out.push_str(&format!("\nfailed: {error}"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_edge_cases() {
        let perfect = metrics(&ConfusionCounts::new(10.0, 0.0, 0.0, 0.0));
        assert_eq!(perfect.precision, Some(1.0));
        assert_eq!(perfect.accuracy, Some(1.0));
        assert_eq!(perfect.recall, Some(1.0));
        assert_eq!(perfect.f1, Some(1.0));
        let empty = metrics(&ConfusionCounts::default());
        assert_eq!(empty, RunMetrics { precision: None, accuracy: None, recall: None, f1: None });
        let no_pos = metrics(&ConfusionCounts::new(0.0, 0.0, 3.0, 2.0));
        assert_eq!(no_pos.precision, None);
        assert_eq!(no_pos.recall, Some(0.0));
        assert_eq!(no_pos.f1, None);
    }

    #[test]
    fn aggregation_rules() {
        let r = |p| RunMetrics { precision: Some(p), accuracy: Some(0.5), recall: Some(0.5), f1: Some(0.5) };
        let a = aggregate_runs(&[r(0.8), r(0.73), r(0.73)]).unwrap();
        assert!((a.precision.mean - 0.7533333333333333).abs() < 1e-12);
        assert_eq!(a.accuracy.std, 0.0);
        let single = aggregate_runs(&[r(0.6)]).unwrap();
        assert_eq!((single.precision.mean, single.precision.std), (0.6, 0.0));
        let undef = RunMetrics { precision: None, ..r(0.0) };
        assert!(matches!(aggregate_runs(&[undef]), Err(EvalError::AllUndefined("precision"))));
        assert!(matches!(aggregate_runs(&[]), Err(EvalError::NoRuns)));

        let c = |tp| ConfusionCounts::new(tp, 0.0, 0.0, 0.0);
        let m = aggregate_counts(&[c(270.0), c(275.0), c(273.0)]).unwrap();
        assert!((m.tp - 272.6666666666667).abs() < 1e-9);
    }

    #[test]
    fn truth_csv_round_trip_and_validation() {
        let csv = "package_name,practice,data_type,verdict,annotator_note\ncom.a,collection,Email address,omission,\ncom.a,sharing,approximate_location,compliant,checked\n";
        let t = TruthSet::from_csv(csv).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(TruthSet::from_csv(&t.to_csv()).unwrap(), t);
        let dup = format!("{csv}com.a,collection,email_address,compliant,\n");
        assert!(matches!(TruthSet::from_csv(&dup), Err(EvalError::DuplicateLabel { .. })));
        let bad = "package_name,practice,data_type,verdict,annotator_note\ncom.a,collection,Shoe size,omission,\n";
        assert!(matches!(TruthSet::from_csv(bad), Err(EvalError::InvalidTruth { line: 2, .. })));
    }
}
