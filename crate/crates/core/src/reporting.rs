//! Corpus aggregation: totals, top data types, store-category heat maps and
//! per-app readable reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dss::AppRef;
use crate::pipeline::{
    extract_json_object, parse_analyzer_output, parse_postprocess_output, AnalysisReport, ExcludedFinding,
    Finding, FindingTrail, PipelineError, RemovalReason, ReportProvenance,
};
use crate::taxonomy::{
    all_categories, all_data_types, resolve_data_type, taxonomy, DataCategoryId, DataTypeId,
    PracticeKind, PromptStrategy,
};
use crate::workspace::write_atomic;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report for unknown app `{0}`")]
    UnknownApp(String),
    #[error("summary invariant violated: {0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Schema {
        path: PathBuf,
        #[source]
        source: PipelineError,
    },
    #[error("invalid summary file: {0}")]
    BadSummary(String),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Omission counts for a corpus. Only omitted findings with a resolved data
/// type are counted; unresolved ones and exclusions are diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub schema_version: u32,
    pub total_omitted: u64,
    pub by_practice: BTreeMap<PracticeKind, u64>,
    pub by_data_type: BTreeMap<DataTypeId, u64>,
    pub by_data_category: BTreeMap<DataCategoryId, u64>,
    pub by_practice_data_type: BTreeMap<PracticeKind, BTreeMap<DataTypeId, u64>>,
    /// store category → practice → data category → count
    pub matrix: BTreeMap<String, BTreeMap<PracticeKind, BTreeMap<DataCategoryId, u64>>>,
    pub app_count: u64,
    pub apps_with_omissions: u64,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub unresolved_omitted: u64,
    pub unresolved_labels: BTreeMap<String, u64>,
    pub excluded_by_reason: BTreeMap<String, u64>,
}

fn bump<K: Ord>(m: &mut BTreeMap<K, u64>, k: K) {
    *m.entry(k).or_insert(0) += 1;
}

/// Aggregates reports. Every report's app must be in `apps`.
pub fn summarize(reports: &[AnalysisReport], apps: &[AppRef]) -> Result<CorpusSummary, ReportError> {
    let by_pkg: BTreeMap<&str, &AppRef> = apps.iter().map(|a| (a.package_name.as_str(), a)).collect();
    let mut s = CorpusSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        app_count: by_pkg.len() as u64,
        ..Default::default()
    };
    let mut flagged_apps = BTreeSet::new();
    for r in reports {
        let app = by_pkg
            .get(r.app.package_name.as_str())
            .ok_or_else(|| ReportError::UnknownApp(r.app.package_name.clone()))?;
        for f in &r.omitted {
            let Some(t) = f.data_type else {
                s.diagnostics.unresolved_omitted += 1;
                bump(&mut s.diagnostics.unresolved_labels, f.data_type_text.clone());
                continue;
            };
            s.total_omitted += 1;
            bump(&mut s.by_practice, r.practice);
            bump(&mut s.by_data_type, t);
            bump(&mut s.by_data_category, t.category());
            bump(s.by_practice_data_type.entry(r.practice).or_default(), t);
            bump(
                s.matrix
                    .entry(app.store_category.clone())
                    .or_default()
                    .entry(r.practice)
                    .or_default(),
                t.category(),
            );
            flagged_apps.insert(app.package_name.as_str());
        }
        for x in &r.excluded {
            bump(&mut s.diagnostics.excluded_by_reason, x.reason.to_string());
        }
    }
    s.apps_with_omissions = flagged_apps.len() as u64;
    s.check_invariants()?;
    Ok(s)
}

impl CorpusSummary {
    pub fn empty() -> Self {
        CorpusSummary {
            schema_version: SUMMARY_SCHEMA_VERSION,
            ..Default::default()
        }
    }

    pub fn practice_total(&self, p: PracticeKind) -> u64 {
        self.by_practice.get(&p).copied().unwrap_or(0)
    }

    pub fn check_invariants(&self) -> Result<(), ReportError> {
        let fail = |m: String| Err(ReportError::Invariant(m));
        if sum_values(&self.by_practice) != self.total_omitted {
            return fail("practice totals do not sum to total".into());
        }
        if sum_values(&self.by_data_type) != self.total_omitted {
            return fail("data type totals do not sum to total".into());
        }
        for c in all_categories() {
            let members: u64 = c.data_types().map(|t| self.by_data_type.get(&t).copied().unwrap_or(0)).sum();
            if members != self.by_data_category.get(&c).copied().unwrap_or(0) {
                return fail(format!("category {} does not equal its member types", c.key()));
            }
        }
        for p in PracticeKind::AUDITED {
            let per_type = self.by_practice_data_type.get(&p).map_or(0, sum_values);
            if per_type != self.practice_total(p) {
                return fail(format!("{p} per-type counts do not sum to the practice total"));
            }
            for c in all_categories() {
                let from_matrix: u64 = self
                    .matrix
                    .values()
                    .map(|m| m.get(&p).and_then(|m| m.get(&c)).copied().unwrap_or(0))
                    .sum();
                let from_types: u64 = c
                    .data_types()
                    .map(|t| self.by_practice_data_type.get(&p).and_then(|m| m.get(&t)).copied().unwrap_or(0))
                    .sum();
                if from_matrix != from_types {
                    return fail(format!("matrix row {} for {p} disagrees with type counts", c.key()));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let s: CorpusSummary = serde_json::from_str(text).map_err(|e| ReportError::BadSummary(e.to_string()))?;
        if s.schema_version != SUMMARY_SCHEMA_VERSION {
            return Err(ReportError::BadSummary(format!("unsupported schema_version {}", s.schema_version)));
        }
        s.check_invariants()?;
        Ok(s)
    }
}

fn sum_values<K>(m: &BTreeMap<K, u64>) -> u64 {
    m.values().sum()
}

/// Descending by count; ties in canonical taxonomy order.
pub fn top_data_types(s: &CorpusSummary, n: usize) -> Vec<(DataTypeId, u64)> {
    let mut v: Vec<(DataTypeId, u64)> = s.by_data_type.iter().map(|(t, c)| (*t, *c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.index().cmp(&b.0.index())));
    v.truncate(n);
    v
}

/// Data categories × store categories for one practice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heatmap {
    pub practice: PracticeKind,
    pub rows: Vec<DataCategoryId>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<u64>>,
}

impl Heatmap {
    pub fn row_total(&self, c: DataCategoryId) -> u64 {
        self.rows
            .iter()
            .position(|r| *r == c)
            .map_or(0, |i| self.cells[i].iter().sum())
    }

    pub fn column_total(&self, store_category: &str) -> u64 {
        self.columns
            .iter()
            .position(|c| c == store_category)
            .map_or(0, |j| self.cells.iter().map(|r| r[j]).sum())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["data_category".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (c, row) in self.rows.iter().zip(&self.cells) {
            let mut rec = vec![c.name().to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// The bundled store categories as columns, plus any others seen in the
/// corpus (sorted, appended).
pub fn heatmap_matrix(s: &CorpusSummary, practice: PracticeKind) -> Heatmap {
    let mut columns: Vec<String> = taxonomy().store_categories().to_vec();
    let extra: BTreeSet<&String> = s.matrix.keys().filter(|k| !columns.contains(k)).collect();
    columns.extend(extra.into_iter().cloned());
    let rows = all_categories();
    let cells = rows
        .iter()
        .map(|c| {
            columns
                .iter()
                .map(|col| {
                    s.matrix
                        .get(col)
                        .and_then(|m| m.get(&practice))
                        .and_then(|m| m.get(c))
                        .copied()
                        .unwrap_or(0)
                })
                .collect()
        })
        .collect();
    Heatmap {
        practice,
        rows,
        columns,
        cells,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    /// `summary.json`
    Structured,
    /// `heatmap_<practice>.csv`, `top_data_types.csv`
    Tabular,
    /// `summary.md`
    Readable,
}

pub fn readable_summary(s: &CorpusSummary) -> String {
    let mut out = String::from("# Omission summary\n\n");
    out.push_str(&format!(
        "Apps: {} ({} with at least one omission)\n\n| Practice | Omissions |\n|---|---|\n",
        s.app_count, s.apps_with_omissions
    ));
    for p in PracticeKind::AUDITED {
        out.push_str(&format!("| {} | {} |\n", p, s.practice_total(p)));
    }
    out.push_str(&format!("| total | {} |\n", s.total_omitted));
    out.push_str("\n## Top 10 data types\n\n| Rank | Data type | Omissions |\n|---|---|---|\n");
    for (i, (t, c)) in top_data_types(s, 10).into_iter().enumerate() {
        out.push_str(&format!("| {} | {} | {} |\n", i + 1, t.name(), c));
    }
    out.push_str("\n## By data category\n\n| Data category | Collection | Sharing |\n|---|---|---|\n");
    for c in all_categories() {
        let per = |p: PracticeKind| -> u64 {
            c.data_types()
                .map(|t| s.by_practice_data_type.get(&p).and_then(|m| m.get(&t)).copied().unwrap_or(0))
                .sum()
        };
        out.push_str(&format!(
            "| {} | {} | {} |\n",
            c.name(),
            per(PracticeKind::Collection),
            per(PracticeKind::Sharing)
        ));
    }
    let d = &s.diagnostics;
    if d.unresolved_omitted > 0 || !d.excluded_by_reason.is_empty() {
        out.push_str("\n## Diagnostics (not counted above)\n\n");
        if d.unresolved_omitted > 0 {
            out.push_str(&format!("Omitted findings with unresolved data type: {}\n", d.unresolved_omitted));
            for (label, n) in &d.unresolved_labels {
                out.push_str(&format!("- `{label}`: {n}\n"));
            }
        }
        if !d.excluded_by_reason.is_empty() {
            out.push_str("\n| Removal reason | Excluded |\n|---|---|\n");
            for (r, n) in &d.excluded_by_reason {
                out.push_str(&format!("| {r} | {n} |\n"));
            }
        }
    }
    out
}

/// Writes the requested formats into `dir`; returns the written paths.
pub fn emit(s: &CorpusSummary, dir: &Path, formats: &[EmitFormat]) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<(), ReportError> {
        let p = dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
        Ok(())
    };
    for f in formats {
        match f {
            EmitFormat::Structured => put("summary.json", s.to_json())?,
            EmitFormat::Tabular => {
                for p in PracticeKind::AUDITED {
                    put(&format!("heatmap_{p}.csv"), heatmap_matrix(s, p).to_csv())?;
                }
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["rank", "data_type", "name", "omissions"]).expect("in-memory write");
                for (i, (t, c)) in top_data_types(s, all_data_types().len()).into_iter().enumerate() {
                    w.write_record([(i + 1).to_string(), t.key().to_string(), t.name().to_string(), c.to_string()])
                        .expect("in-memory write");
                }
                put("top_data_types.csv", String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"))?;
            }
            EmitFormat::Readable => put("summary.md", readable_summary(s))?,
        }
    }
    Ok(written)
}

/// Human-readable report for one app and practice.
pub fn app_report_markdown(r: &AnalysisReport) -> String {
    let mut out = format!(
        "# {} ({}), {} run {}\n\n## Omitted declarations ({})\n\n",
        r.app.package_name,
        if r.app.store_category.is_empty() { "unknown category" } else { &r.app.store_category },
        r.practice,
        r.run_id,
        r.omitted.len()
    );
    for (f, trail) in r.omitted.iter().zip(r.provenance.omitted.iter().map(Some).chain(std::iter::repeat(None))) {
        let unverified = trail.is_some_and(|t| !t.verbatim);
        out.push_str(&format!(
            "- **{}**{}: \"{}\"\n",
            f.data_type_text,
            if unverified { " (excerpt not found in policy)" } else { "" },
            f.policy_reference
        ));
    }
    out.push_str(&format!("\n## Excluded declarations ({})\n\n", r.excluded.len()));
    for x in &r.excluded {
        out.push_str(&format!(
            "- **{}** [{}]: {} Excerpt: \"{}\"\n",
            x.finding.data_type_text, x.reason, x.justification, x.finding.policy_reference
        ));
    }
    if !r.provenance.warnings.is_empty() {
        out.push_str("\n## Warnings\n\n");
        for w in &r.provenance.warnings {
            out.push_str(&format!("- {w}\n"));
        }
    }
    out
}

fn practice_from_name(stem: &str) -> Option<PracticeKind> {
    let s = stem.to_lowercase();
    match (s.contains("collection") || s.contains("collected"), s.contains("sharing") || s.contains("shared")) {
        (true, false) => Some(PracticeKind::Collection),
        (false, true) => Some(PracticeKind::Sharing),
        _ => None,
    }
}

/// Ingests released per-app result files.
///
/// Layout: `<dir>/<store_category>/<package>/<file>.json`, where the file
/// name contains `collection` or `sharing` and the body has the omitted
/// (and optionally excluded) declarations shape. An `apps.csv`
/// (`package_name,store_category`) at the root overrides the directory
/// category. Other files are ignored.
pub fn load_replication_dir(dir: &Path) -> Result<(Vec<AnalysisReport>, Vec<AppRef>), ReportError> {
    let mut overrides = BTreeMap::new();
    let index = dir.join("apps.csv");
    if index.exists() {
        let mut rdr = csv::Reader::from_path(&index).map_err(|e| ReportError::BadSummary(e.to_string()))?;
        for row in rdr.records() {
            let row = row.map_err(|e| ReportError::BadSummary(e.to_string()))?;
            if let (Some(p), Some(c)) = (row.get(0), row.get(1)) {
                overrides.insert(p.trim().to_string(), c.trim().to_string());
            }
        }
    }
    let mut files = Vec::new();
    collect_json(dir, &mut files)?;
    files.sort();
    let mut apps: BTreeMap<String, AppRef> = BTreeMap::new();
    let mut reports = Vec::new();
    for path in files {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let Some(practice) = practice_from_name(&stem) else { continue };
        let Some(pkg_dir) = path.parent().filter(|p| p != &dir) else { continue };
        let package = pkg_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let category = overrides.get(&package).cloned().unwrap_or_else(|| {
            pkg_dir
                .parent()
                .filter(|p| *p != dir)
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
        let text = fs::read_to_string(&path)?;
        let schema = |source| ReportError::Schema { path: path.clone(), source };
        let root = extract_json_object(&text).map_err(schema)?;
        let (omitted, excluded) = if root.get("excluded_declarations").is_some() {
            let reply = parse_postprocess_output(&text).map_err(schema)?;
            let omitted = reply
                .omitted
                .into_iter()
                .map(|e| replication_finding(&e.data_type, e.policy_reference, e.lang, practice))
                .collect::<Vec<_>>();
            let excluded = reply
                .excluded
                .into_iter()
                .map(|e| ExcludedFinding {
                    reason: RemovalReason::from_keyword(&e.reason_of_removal).unwrap_or(RemovalReason::LlmJudgment),
                    justification: e.justification,
                    finding: replication_finding(&e.data_type, e.policy_reference, e.lang, practice),
                })
                .collect::<Vec<_>>();
            (omitted, excluded)
        } else {
            (parse_analyzer_output(&text, practice, "").map_err(schema)?, Vec::new())
        };
        let app = apps.entry(package.clone()).or_insert_with(|| AppRef {
            package_name: package.clone(),
            store_category: category,
            installs_floor: 0,
        });
        let trail = |f: &Finding| FindingTrail {
            data_type_text: f.data_type_text.clone(),
            resolved_data_type: f.data_type,
            scopes: Vec::new(),
            llm_verdict: String::new(),
            evidence_tags: Vec::new(),
            overridden: false,
            verbatim: true,
            model_lang: f.lang.clone(),
        };
        reports.push(AnalysisReport {
            app: app.clone(),
            practice,
            run_id: 1,
            provenance: ReportProvenance {
                package_name: package,
                store_category: app.store_category.clone(),
                practice,
                run_id: 1,
                strategy: PromptStrategy::ThreeGroups,
                model_id: String::new(),
                omitted: omitted.iter().map(trail).collect(),
                excluded: excluded.iter().map(|x| trail(&x.finding)).collect(),
                warnings: Vec::new(),
            },
            omitted,
            excluded,
        });
    }
    Ok((reports, apps.into_values().collect()))
}

fn replication_finding(data_type: &str, policy_reference: String, lang: String, practice: PracticeKind) -> Finding {
    Finding {
        data_type: resolve_data_type(data_type, Some(&lang)),
        data_type_text: data_type.to_string(),
        policy_reference,
        lang,
        practice,
        scope_label: String::new(),
    }
}

fn collect_json(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_json(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "json") {
            out.push(p);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Finding;

    fn report(pkg: &str, practice: PracticeKind, types: &[&str]) -> AnalysisReport {
        let omitted: Vec<Finding> = types
            .iter()
            .map(|t| Finding {
                data_type_text: t.to_string(),
                data_type: resolve_data_type(t, None),
                policy_reference: format!("We process {t}."),
                lang: "en".into(),
                practice,
                scope_label: String::new(),
            })
            .collect();
        AnalysisReport {
            app: AppRef::new(pkg),
            practice,
            run_id: 1,
            provenance: ReportProvenance {
                package_name: pkg.into(),
                store_category: String::new(),
                practice,
                run_id: 1,
                strategy: PromptStrategy::ThreeGroups,
                model_id: String::new(),
                omitted: Vec::new(),
                excluded: Vec::new(),
                warnings: Vec::new(),
            },
            omitted,
            excluded: Vec::new(),
        }
    }

    fn app(pkg: &str, cat: &str) -> AppRef {
        AppRef {
            package_name: pkg.into(),
            store_category: cat.into(),
            installs_floor: 0,
        }
    }

    #[test]
    fn empty_and_single() {
        let s = summarize(&[], &[]).unwrap();
        assert_eq!(s.total_omitted, 0);
        let h = heatmap_matrix(&s, PracticeKind::Sharing);
        assert_eq!((h.rows.len(), h.columns.len()), (14, 33));
        assert!(h.cells.iter().flatten().all(|c| *c == 0));

        let one = summarize(&[report("a.b", PracticeKind::Collection, &["Email address"])], &[app("a.b", "TOOLS")]).unwrap();
        assert_eq!(one.total_omitted, 1);
        assert_eq!(one.practice_total(PracticeKind::Collection), 1);
    }

    #[test]
    fn unknown_app_and_unresolved() {
        let r = report("a.b", PracticeKind::Collection, &["Shoe size", "Name"]);
        assert!(matches!(summarize(std::slice::from_ref(&r), &[]), Err(ReportError::UnknownApp(_))));
        let s = summarize(&[r], &[app("a.b", "TOOLS")]).unwrap();
        assert_eq!((s.total_omitted, s.diagnostics.unresolved_omitted), (1, 1));
    }

    #[test]
    fn ties_follow_canonical_order_and_permutation_invariance() {
        let r1 = report("a.b", PracticeKind::Collection, &["Name", "Approximate location"]);
        let r2 = report("c.d", PracticeKind::Sharing, &["Email address"]);
        let apps = [app("a.b", "TOOLS"), app("c.d", "GAME")];
        let s = summarize(&[r1.clone(), r2.clone()], &apps).unwrap();
        assert_eq!(s, summarize(&[r2, r1], &apps).unwrap());
        let top: Vec<&str> = top_data_types(&s, 10).iter().map(|(t, _)| t.key()).collect();
        assert_eq!(top, ["approximate_location", "name", "email_address"]);
        assert!(top_data_types(&s, 0).is_empty());
        assert_eq!(CorpusSummary::from_json(&s.to_json()).unwrap(), s);
    }
}
