//! Certification-support report: analysis results, counter verdicts and
//! catalog rationale mapped onto the objectives they support.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    AnalysisDocument, AssessmentRecord, HistogramExport, PartitioningRecord, PrunedCatalog, RequirementResult,
    SensitivityMatrix, WcetEstimate,
};
use crate::counters::{CounterVerdict, VerdictStatus};
use crate::harness::Phase;
use crate::platform::{ChannelCatalog, Topology};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("objective {objective} references evidence `{id}`, which the report does not contain")]
    DanglingReference { objective: String, id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EvidenceCategory {
    Catalog,
    Pruning,
    CounterVerification,
    PlatformAssessment,
    SoftwareAssessment,
    Partitioning,
    Wcet,
    Requirement,
    Summary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub id: String,
    pub category: EvidenceCategory,
    pub title: String,
    /// Where the underlying data lives.
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ObjectiveStatus {
    Supported,
    Unsupported,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveEntry {
    pub status: ObjectiveStatus,
    pub evidence: Vec<String>,
    pub explanation: String,
}

pub const MCP_RESOURCE_USAGE_3: &str = "MCP_Resource_Usage_3";
pub const MCP_SOFTWARE_1: &str = "MCP_Software_1";
pub const MCP_ACCOMPLISHMENT_SUMMARY: &str = "MCP_Accomplishment_Summary";

/// Objective, the category it cannot be supported without, and the
/// categories that contribute to it.
const OBJECTIVES: [(&str, EvidenceCategory, &[EvidenceCategory]); 3] = [
    (
        MCP_RESOURCE_USAGE_3,
        EvidenceCategory::Catalog,
        &[EvidenceCategory::Catalog, EvidenceCategory::Pruning],
    ),
    (
        MCP_SOFTWARE_1,
        EvidenceCategory::SoftwareAssessment,
        &[
            EvidenceCategory::SoftwareAssessment,
            EvidenceCategory::Partitioning,
            EvidenceCategory::Wcet,
            EvidenceCategory::Requirement,
        ],
    ),
    (
        MCP_ACCOMPLISHMENT_SUMMARY,
        EvidenceCategory::Summary,
        &[
            EvidenceCategory::Summary,
            EvidenceCategory::CounterVerification,
            EvidenceCategory::PlatformAssessment,
        ],
    ),
];

/// Objectives this tool does not produce evidence for.
pub const OUT_OF_TOOL: [(&str, &str); 7] = [
    (
        "MCP_Planning_1",
        "platform and configuration planning; integrator's plans",
    ),
    (
        "MCP_Planning_2",
        "MCP configuration settings and their verification; integrator's plans",
    ),
    (
        "MCP_Resource_Usage_1",
        "configuration of critical settings; platform configuration records",
    ),
    (
        "MCP_Resource_Usage_2",
        "unintended dynamic configuration changes; platform safety analysis",
    ),
    (
        "MCP_Resource_Usage_4",
        "resource capacity and demand; integrator's resource analysis",
    ),
    (
        "MCP_Software_2",
        "data and control coupling across cores; software verification records",
    ),
    (
        "MCP_Error_Handling_1",
        "error detection and handling; platform safety analysis",
    ),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool_version: String,
    pub config_hash: String,
    /// SHA-256 of the analysis document this report was assembled from.
    pub analysis_sha256: Option<String>,
    pub topology: Option<Topology>,
    pub catalog: Option<ChannelCatalog>,
    pub counter_verdicts: Vec<CounterVerdict>,
    pub sensitivity: SensitivityMatrix,
    pub assessments: Vec<AssessmentRecord>,
    pub pruned: Vec<PrunedCatalog>,
    pub partitioning: Vec<PartitioningRecord>,
    pub wcet: Vec<WcetEstimate>,
    pub requirements: Vec<RequirementResult>,
    pub exports: Vec<HistogramExport>,
    pub evidence: Vec<EvidenceItem>,
    pub objectives: BTreeMap<String, ObjectiveEntry>,
    pub out_of_tool: BTreeMap<String, String>,
    pub residual_risks: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Structured,
    HumanReadable,
}

impl Report {
    /// A report with no content; every objective is unsupported.
    pub fn empty(config_hash: &str) -> Self {
        let mut r = Report {
            tool_version: crate::TOOL_VERSION.to_string(),
            config_hash: config_hash.to_string(),
            analysis_sha256: None,
            topology: None,
            catalog: None,
            counter_verdicts: Vec::new(),
            sensitivity: SensitivityMatrix::default(),
            assessments: Vec::new(),
            pruned: Vec::new(),
            partitioning: Vec::new(),
            wcet: Vec::new(),
            requirements: Vec::new(),
            exports: Vec::new(),
            evidence: Vec::new(),
            objectives: BTreeMap::new(),
            out_of_tool: OUT_OF_TOOL
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            residual_risks: Vec::new(),
            notes: Vec::new(),
        };
        r.refresh();
        r
    }

    pub fn assemble(
        topology: &Topology,
        catalog: &ChannelCatalog,
        analysis: &AnalysisDocument,
        analysis_sha256: &str,
    ) -> Self {
        let mut r = Report::empty(&analysis.config_hash);
        r.analysis_sha256 = Some(analysis_sha256.to_string());
        r.topology = Some(topology.clone());
        r.catalog = Some(catalog.clone());
        r.counter_verdicts = analysis.counter_verdicts.clone();
        r.sensitivity = analysis.sensitivity.clone();
        r.assessments = analysis.assessments.clone();
        r.pruned = analysis.pruned.clone();
        r.partitioning = analysis.partitioning.clone();
        r.wcet = analysis.wcet.clone();
        r.requirements = analysis.requirements.clone();
        r.exports = analysis.exports.clone();
        r.notes = analysis.notes.clone();
        r.residual_risks = residual_risks(analysis);
        r.refresh();
        r
    }

    /// Recomputes evidence items and the objective map from the content.
    pub fn refresh(&mut self) {
        self.evidence = collect_evidence(self);
        self.objectives = map_objectives(&self.evidence);
    }

    pub fn any_requirement_failed(&self) -> bool {
        self.requirements
            .iter()
            .any(|r| r.status == crate::analysis::RequirementStatus::Fail)
    }
}

fn residual_risks(a: &AnalysisDocument) -> Vec<String> {
    let mut out = Vec::new();
    if !a.wcet.is_empty() {
        out.push(
            "Margins are summed within a coupling group and maximized across groups. Contention that triggers timeouts or retries can make coupled margins super-additive; such effects are not quantified."
                .into(),
        );
    }
    if a.counter_verdicts.is_empty() {
        out.push("Counters were not verified; no counter-derived evidence (fingerprints, pruning) was used.".into());
    } else if a.counter_verdicts.iter().any(|v| v.status != VerdictStatus::Pass) {
        let untrusted: Vec<String> = a
            .counter_verdicts
            .iter()
            .filter(|v| v.status != VerdictStatus::Pass)
            .map(|v| format!("{} ({:?})", v.event, v.status))
            .collect();
        out.push(format!(
            "Counters not verified for: {}. Rates from these events were not trusted.",
            untrusted.join(", ")
        ));
    }
    let unobserved: BTreeSet<&str> = a
        .fingerprints
        .iter()
        .flat_map(|f| f.unobserved.iter().map(String::as_str))
        .collect();
    if !unobserved.is_empty() {
        out.push(format!(
            "Channels unobserved in fingerprints (never treated as zero use): {}.",
            unobserved.into_iter().collect::<Vec<_>>().join(", ")
        ));
    }
    let invalid = a.traces.iter().filter(|t| !t.valid).count();
    if invalid > 0 {
        out.push(format!(
            "{invalid} trace(s) were marked invalid and excluded from analysis."
        ));
    }
    for w in a.wcet.iter().filter(|w| !w.consistent) {
        out.push(format!(
            "WCET estimate for `{}` is below its observed maximum; the observed maximum governs.",
            w.workload
        ));
    }
    out
}

pub fn collect_evidence(r: &Report) -> Vec<EvidenceItem> {
    let mut ev = Vec::new();
    let mut push = |id: String, category, title: String, source: String| {
        ev.push(EvidenceItem {
            id,
            category,
            title,
            source,
        })
    };
    if let Some(c) = &r.catalog {
        push(
            "catalog".into(),
            EvidenceCategory::Catalog,
            format!(
                "Interference channel catalog ({} channels, {} excluded)",
                c.channels.len(),
                c.excluded.len()
            ),
            "report.json#/catalog".into(),
        );
    }
    for (i, p) in r.pruned.iter().enumerate() {
        push(
            format!("pruning-{}", p.workload),
            EvidenceCategory::Pruning,
            format!(
                "Channel pruning for `{}` ({} kept, {} excluded)",
                p.workload,
                p.catalog.channels.len(),
                p.catalog.excluded.len()
            ),
            format!("report.json#/pruned/{i}"),
        );
    }
    for (i, v) in r.counter_verdicts.iter().enumerate() {
        push(
            format!("counters-{}", v.event),
            EvidenceCategory::CounterVerification,
            format!("Counter verification of {}: {:?}", v.event, v.status),
            format!("report.json#/counter_verdicts/{i}"),
        );
    }
    for (i, a) in r.assessments.iter().enumerate() {
        let category = match a.phase {
            Phase::Platform => EvidenceCategory::PlatformAssessment,
            Phase::Software => EvidenceCategory::SoftwareAssessment,
        };
        push(
            a.id.clone(),
            category,
            format!(
                "`{}` against {} adversaries on `{}`: {:?}",
                a.victim,
                a.adversaries.len(),
                a.assessment.channel,
                a.assessment.verdict
            ),
            format!("report.json#/assessments/{i}"),
        );
    }
    for (i, p) in r.partitioning.iter().enumerate() {
        push(
            format!("partitioning-{}", p.channel),
            EvidenceCategory::Partitioning,
            format!("Partitioning of `{}`: {:?}", p.channel, p.status),
            format!("report.json#/partitioning/{i}"),
        );
    }
    for (i, w) in r.wcet.iter().enumerate() {
        push(
            format!("wcet-{}", w.workload),
            EvidenceCategory::Wcet,
            format!("WCET estimate for `{}`: {} ns", w.workload, w.estimate_ns),
            format!("report.json#/wcet/{i}"),
        );
    }
    for (i, q) in r.requirements.iter().enumerate() {
        push(
            format!("requirement-{}", q.id),
            EvidenceCategory::Requirement,
            format!("Requirement `{}`: {:?}", q.id, q.status),
            format!("report.json#/requirements/{i}"),
        );
    }
    if !r.assessments.is_empty() {
        push(
            "summary".into(),
            EvidenceCategory::Summary,
            "Multicore interference evidence summary".into(),
            "report.md".into(),
        );
    }
    ev
}

/// Maps each objective to its evidence. An objective is supported only with
/// at least one item of its required category.
pub fn map_objectives(evidence: &[EvidenceItem]) -> BTreeMap<String, ObjectiveEntry> {
    OBJECTIVES
        .iter()
        .map(|&(name, required, contributing)| {
            let has_required = evidence.iter().any(|e| e.category == required);
            let entry = if has_required {
                ObjectiveEntry {
                    status: ObjectiveStatus::Supported,
                    evidence: evidence
                        .iter()
                        .filter(|e| contributing.contains(&e.category))
                        .map(|e| e.id.clone())
                        .collect(),
                    explanation: format!("supported by {:?} evidence", required),
                }
            } else {
                ObjectiveEntry {
                    status: ObjectiveStatus::Unsupported,
                    evidence: Vec::new(),
                    explanation: format!("no {:?} evidence in this report", required),
                }
            };
            (name.to_string(), entry)
        })
        .collect()
}

/// Fails on the first objective reference that names no evidence item.
pub fn check_references(r: &Report) -> Result<(), ReportError> {
    let ids: BTreeSet<&str> = r.evidence.iter().map(|e| e.id.as_str()).collect();
    for (objective, entry) in &r.objectives {
        if let Some(id) = entry.evidence.iter().find(|id| !ids.contains(id.as_str())) {
            return Err(ReportError::DanglingReference {
                objective: objective.clone(),
                id: id.clone(),
            });
        }
    }
    Ok(())
}

pub fn render(r: &Report, format: Format) -> Result<String, ReportError> {
    check_references(r)?;
    Ok(match format {
        Format::Structured => {
            let v = serde_json::to_value(r).expect("report serializes");
            let mut s = serde_json::to_string_pretty(&v).expect("values serialize");
            s.push('\n');
            s
        }
        Format::HumanReadable => markdown(r),
    })
}

fn cell(s: &str) -> String {
    s.replace('|', "\\|").replace('\n', " ")
}

fn markdown(r: &Report) -> String {
    let mut md = String::new();
    let w = &mut md;
    let _ = writeln!(w, "# Multicore interference evidence\n");
    let _ = writeln!(w, "- Tool version: {}", r.tool_version);
    let _ = writeln!(w, "- Config hash: `{}`", r.config_hash);
    if let Some(h) = &r.analysis_sha256 {
        let _ = writeln!(w, "- Analysis document SHA-256: `{h}`");
    }
    let _ = writeln!(w);

    let _ = writeln!(w, "## Objectives\n");
    let _ = writeln!(w, "| Objective | Status | Evidence | Explanation |");
    let _ = writeln!(w, "|---|---|---|---|");
    for (name, e) in &r.objectives {
        let _ = writeln!(
            w,
            "| {name} | {:?} | {} | {} |",
            e.status,
            if e.evidence.is_empty() {
                "—".to_string()
            } else {
                e.evidence.join(", ")
            },
            cell(&e.explanation)
        );
    }
    let _ = writeln!(w, "\nOther objectives are outside this tool:\n");
    for (name, why) in &r.out_of_tool {
        let _ = writeln!(w, "- {name}: {why}");
    }
    let _ = writeln!(w);

    if let Some(c) = &r.catalog {
        let _ = writeln!(w, "## Interference channels\n");
        let _ = writeln!(w, "| Channel | Resource | Scope | Coupling group | Rationale |");
        let _ = writeln!(w, "|---|---|---|---|---|");
        for ch in &c.channels {
            let scope: Vec<String> = ch.scope.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(
                w,
                "| {} | {} | {} | {} | {} |",
                ch.id,
                ch.resource,
                scope.join(","),
                ch.coupling_group,
                cell(c.rationale.get(&ch.id).map(String::as_str).unwrap_or(""))
            );
        }
        for ch in &c.excluded {
            let _ = writeln!(
                w,
                "| ~~{}~~ | {} | | {} | {} |",
                ch.id,
                ch.resource,
                ch.coupling_group,
                cell(c.rationale.get(&ch.id).map(String::as_str).unwrap_or("excluded"))
            );
        }
        let _ = writeln!(w);
    }

    if !r.pruned.is_empty() {
        let _ = writeln!(w, "## Pruning\n");
        for p in &r.pruned {
            let _ = writeln!(w, "Workload `{}`:\n", p.workload);
            for ch in &p.catalog.excluded {
                let _ = writeln!(
                    w,
                    "- excluded `{}`: {}",
                    ch.id,
                    p.catalog.rationale.get(&ch.id).map(String::as_str).unwrap_or("")
                );
            }
            for ch in &p.catalog.channels {
                let _ = writeln!(w, "- kept `{}`", ch.id);
            }
            let _ = writeln!(w);
        }
    }

    let _ = writeln!(w, "## Counter verification\n");
    if r.counter_verdicts.is_empty() {
        let _ = writeln!(w, "No counter verification results.\n");
    } else {
        let _ = writeln!(w, "| Event | Status | Expected | Observed | Band |");
        let _ = writeln!(w, "|---|---|---|---|---|");
        for v in &r.counter_verdicts {
            let _ = writeln!(
                w,
                "| {} | {:?} | {} | {} | ±{} |",
                v.event,
                v.status,
                v.expected,
                v.observed.map_or("—".to_string(), |o| o.to_string()),
                v.band
            );
        }
        let _ = writeln!(w);
    }

    if !r.sensitivity.cells().is_empty() {
        let _ = writeln!(w, "## Platform sensitivity\n");
        let _ = writeln!(
            w,
            "| Victim | Adversaries | Channel | Shift | Max | Dispersion | p | Verdict |"
        );
        let _ = writeln!(w, "|---|---|---|---|---|---|---|---|");
        for c in r.sensitivity.cells() {
            let _ = writeln!(
                w,
                "| {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3e} | {:?} |",
                c.victim,
                c.adversary,
                c.channel,
                c.shift_factor,
                c.max_factor,
                c.dispersion_factor,
                c.p_value,
                c.verdict
            );
        }
        let _ = writeln!(w);
    }

    let _ = writeln!(w, "## Assessments\n");
    for a in &r.assessments {
        let s = &a.assessment;
        let _ = writeln!(w, "### Comparison: {}\n", a.id);
        let _ = writeln!(
            w,
            "Victim `{}` ({:?} phase) against [{}] on channel `{}`, repetitions {:?}; baseline `{}`.\n",
            a.victim,
            a.phase,
            a.adversaries.join(", "),
            s.channel,
            a.repetitions,
            a.baseline_scenario
        );
        let _ = writeln!(w, "| | n | min | p50 | p95 | max | IQR |");
        let _ = writeln!(w, "|---|---|---|---|---|---|---|");
        for (name, p) in [("isolation", &s.baseline), ("contended", &s.contended)] {
            let _ = writeln!(
                w,
                "| {name} | {} | {} | {} | {} | {} | {} |",
                p.n,
                p.min,
                p.p50,
                p.p95,
                p.max,
                p.p75 - p.p25
            );
        }
        let _ = writeln!(
            w,
            "\nShift factor {:.3}, max factor {:.3}, dispersion factor {:.3}; rank test U = {}, p = {:.3e} ({}). Verdict: **{:?}**.\n",
            s.shift_factor,
            s.max_factor,
            s.dispersion_factor,
            s.test.statistic,
            s.test.p_value,
            if s.test.exact { "exact" } else { "normal approximation" },
            s.verdict
        );
        if let Some(x) = r.exports.iter().find(|x| x.assessment == a.id) {
            let _ = writeln!(
                w,
                "![histogram]({}) — data: [isolation]({}), [contended]({})\n",
                x.svg, x.baseline_csv, x.contended_csv
            );
        }
    }

    if !r.partitioning.is_empty() {
        let _ = writeln!(w, "## Partitioning\n");
        for p in &r.partitioning {
            let _ = writeln!(
                w,
                "- `{}`: {} — {}{}",
                p.channel,
                p.status.map_or("NO EVIDENCE".to_string(), |s| format!("{s:?}")),
                p.note,
                if p.violations.is_empty() {
                    String::new()
                } else {
                    format!("; violations: {}", p.violations.join(", "))
                }
            );
        }
        let _ = writeln!(w);
    }

    if !r.wcet.is_empty() {
        let _ = writeln!(w, "## WCET estimates\n");
        let _ = writeln!(
            w,
            "| Workload | Isolation max (ns) | Observed max (ns) | Margin | Estimate (ns) | Channels |"
        );
        let _ = writeln!(w, "|---|---|---|---|---|---|");
        for e in &r.wcet {
            let _ = writeln!(
                w,
                "| {} | {} | {} | {} | {} | {} |",
                e.workload,
                e.isolation_max_ns,
                e.observed_max_ns,
                e.margin.total,
                e.estimate_ns,
                e.channels.join(", ")
            );
        }
        let _ = writeln!(w);
    }

    if !r.requirements.is_empty() {
        let _ = writeln!(w, "## Requirements\n");
        let _ = writeln!(w, "| Requirement | Workload | Allowed | Actual | Status |");
        let _ = writeln!(w, "|---|---|---|---|---|");
        for q in &r.requirements {
            let _ = writeln!(
                w,
                "| {} | {} | {} | {} | {:?} |",
                q.id,
                q.workload,
                q.allowed,
                q.actual.map_or("—".to_string(), |m| m.to_string()),
                q.status
            );
        }
        let _ = writeln!(w);
    }

    let _ = writeln!(w, "## Residual risk\n");
    if r.residual_risks.is_empty() {
        let _ = writeln!(w, "None recorded.");
    }
    for n in &r.residual_risks {
        let _ = writeln!(w, "- {n}");
    }
    if !r.notes.is_empty() {
        let _ = writeln!(w, "\n## Notes\n");
        for n in &r.notes {
            let _ = writeln!(w, "- {n}");
        }
    }
    let _ = writeln!(w, "\n## Evidence index\n");
    for e in &r.evidence {
        let _ = writeln!(w, "- `{}` ({:?}): {} — {}", e.id, e.category, e.title, e.source);
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_supports_nothing() {
        let r = Report::empty("h");
        assert_eq!(r.objectives.len(), 3);
        assert!(r.objectives.values().all(|e| e.status == ObjectiveStatus::Unsupported));
        render(&r, Format::Structured).unwrap();
    }

    #[test]
    fn dangling_reference_is_an_error() {
        let mut r = Report::empty("h");
        r.objectives
            .get_mut(MCP_SOFTWARE_1)
            .unwrap()
            .evidence
            .push("ghost".into());
        match render(&r, Format::HumanReadable) {
            Err(ReportError::DanglingReference { id, .. }) => assert_eq!(id, "ghost"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn objective_needs_its_required_category() {
        let item = |id: &str, category| EvidenceItem {
            id: id.into(),
            category,
            title: String::new(),
            source: String::new(),
        };
        // Partitioning alone does not support the software objective.
        let m = map_objectives(&[
            item("p", EvidenceCategory::Partitioning),
            item("c", EvidenceCategory::Catalog),
        ]);
        assert_eq!(m[MCP_SOFTWARE_1].status, ObjectiveStatus::Unsupported);
        assert_eq!(m[MCP_RESOURCE_USAGE_3].status, ObjectiveStatus::Supported);
        assert_eq!(m[MCP_RESOURCE_USAGE_3].evidence, vec!["c".to_string()]);
        let m = map_objectives(&[
            item("p", EvidenceCategory::Partitioning),
            item("a", EvidenceCategory::SoftwareAssessment),
        ]);
        assert_eq!(m[MCP_SOFTWARE_1].evidence, vec!["p".to_string(), "a".to_string()]);
    }
}
