//! The analysis document: every profile, assessment, matrix, estimate and
//! requirement result derived from one campaign's traces.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::export::{histogram_csv, histogram_svg};
use super::{
    assess_partitioning, build_paired_profiles, build_profile, compare, estimate_wcet, evaluate_requirement,
    AnalysisError, DetectionPolicy, ExecutionTimeProfile, InterferenceAssessment, Margin, PartitioningStatus,
    ProfileSummary, Requirement, RequirementResult, RequirementStatus, SensitivityCell, SensitivityMatrix,
    WcetEstimate,
};
use crate::counters::{CounterEvent, CounterVerdict, VerdictStatus};
use crate::harness::{usage_events, Phase, ResourceUsageProfile, RunTrace, Scenario};
use crate::platform::{prune_catalog, ChannelCatalog, Topology};

/// A trace file as read from disk.
#[derive(Debug, Clone)]
pub struct LoadedTrace {
    pub file: String,
    pub sha256: String,
    pub trace: RunTrace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRef {
    pub file: String,
    pub sha256: String,
    pub scenario: String,
    pub rep: u32,
    pub valid: bool,
    pub victim_records: u64,
    pub adversary_records: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

pub struct AnalysisInputs<'a> {
    pub config_hash: &'a str,
    pub topology: &'a Topology,
    pub catalog: &'a ChannelCatalog,
    pub scenarios: &'a [Scenario],
    pub policy: DetectionPolicy,
    pub requirements: &'a [Requirement],
    pub partitioned_channels: &'a [String],
    pub traces: &'a [LoadedTrace],
    pub fingerprints: &'a [ResourceUsageProfile],
    pub counter_verdicts: &'a [CounterVerdict],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentRecord {
    pub id: String,
    pub scenario: String,
    pub baseline_scenario: String,
    pub phase: Phase,
    pub victim: String,
    pub adversaries: Vec<String>,
    pub repetitions: Vec<u32>,
    pub assessment: InterferenceAssessment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedCatalog {
    pub workload: String,
    pub catalog: ChannelCatalog,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitioningRecord {
    pub channel: String,
    /// Absent when no assessment covers the channel.
    pub status: Option<PartitioningStatus>,
    /// Assessment ids that showed interference.
    pub violations: Vec<String>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramExport {
    pub assessment: String,
    pub baseline_csv: String,
    pub contended_csv: String,
    pub svg: String,
}

/// A file to write next to the analysis document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportFile {
    pub path: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisDocument {
    pub tool_version: String,
    pub config_hash: String,
    pub policy: DetectionPolicy,
    pub traces: Vec<TraceRef>,
    /// Victim profile per scenario, pooled over valid repetitions.
    pub profiles: BTreeMap<String, ProfileSummary>,
    pub assessments: Vec<AssessmentRecord>,
    pub sensitivity: SensitivityMatrix,
    pub counter_verdicts: Vec<CounterVerdict>,
    /// Events whose counters passed verification; only these feed rates.
    pub trusted_events: Vec<CounterEvent>,
    pub fingerprints: Vec<ResourceUsageProfile>,
    pub pruned: Vec<PrunedCatalog>,
    pub partitioning: Vec<PartitioningRecord>,
    pub wcet: Vec<WcetEstimate>,
    pub requirements: Vec<RequirementResult>,
    pub exports: Vec<HistogramExport>,
    pub notes: Vec<String>,
}

impl AnalysisDocument {
    pub fn failed_requirements(&self) -> impl Iterator<Item = &RequirementResult> {
        self.requirements.iter().filter(|r| r.status == RequirementStatus::Fail)
    }

    /// Pretty JSON with sorted keys and a trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("analysis serializes");
        let mut s = serde_json::to_string_pretty(&v).expect("values serialize");
        s.push('\n');
        s
    }
}

fn trace_ref(t: &LoadedTrace) -> TraceRef {
    TraceRef {
        file: t.file.clone(),
        sha256: t.sha256.clone(),
        scenario: t.trace.header.scenario.clone(),
        rep: t.trace.header.rep,
        valid: t.trace.header.valid,
        victim_records: t.trace.victim_records().count() as u64,
        adversary_records: t.trace.adversary_records().count() as u64,
        flags: t.trace.header.flags.clone(),
    }
}

fn adversary_label(s: &Scenario) -> String {
    let mut labels: Vec<&str> = s.adversaries.iter().map(|p| p.workload.label.as_str()).collect();
    labels.dedup();
    format!("{}x {}", s.adversaries.len(), labels.join("+"))
}

/// Sum over adversary cores of each core's peak per-record rate of `event`.
fn adversary_peak_rate(traces: &[&RunTrace], event: CounterEvent) -> Option<f64> {
    let mut per_core: BTreeMap<u32, f64> = BTreeMap::new();
    for t in traces {
        for r in t.adversary_records() {
            if let Some(&d) = r.ctr.get(&event) {
                let rate = d as f64 / (r.duration_ns() as f64 / 1e6);
                let slot = per_core.entry(r.core).or_insert(0.0);
                *slot = slot.max(rate);
            }
        }
    }
    (!per_core.is_empty()).then(|| per_core.values().sum())
}

/// Builds the analysis document and its histogram exports. Pure: identical
/// inputs give identical outputs.
pub fn analyze(inputs: &AnalysisInputs<'_>) -> Result<(AnalysisDocument, Vec<ExportFile>), AnalysisError> {
    let mut notes = Vec::new();
    let scenario_ids: BTreeSet<&str> = inputs.scenarios.iter().map(|s| s.id.as_str()).collect();

    let mut traces: Vec<&LoadedTrace> = inputs.traces.iter().collect();
    traces.sort_by(|a, b| {
        (&a.trace.header.scenario, a.trace.header.rep).cmp(&(&b.trace.header.scenario, b.trace.header.rep))
    });
    let mut valid: BTreeMap<&str, Vec<&RunTrace>> = BTreeMap::new();
    for t in &traces {
        let h = &t.trace.header;
        if h.config_hash != inputs.config_hash {
            return Err(AnalysisError::Reference(format!(
                "trace `{}` was produced by config {}, not {}",
                t.file, h.config_hash, inputs.config_hash
            )));
        }
        if !scenario_ids.contains(h.scenario.as_str()) {
            return Err(AnalysisError::Reference(format!(
                "trace `{}` names scenario `{}`, which the config does not define",
                t.file, h.scenario
            )));
        }
        if h.valid {
            valid.entry(h.scenario.as_str()).or_default().push(&t.trace);
        } else {
            notes.push(format!(
                "trace `{}` ({} rep {}) is marked invalid and was excluded: {}",
                t.file,
                h.scenario,
                h.rep,
                h.error.clone().unwrap_or_else(|| h.flags.join("; "))
            ));
        }
    }

    let trusted: BTreeSet<CounterEvent> = inputs
        .counter_verdicts
        .iter()
        .filter(|v| v.status == VerdictStatus::Pass)
        .map(|v| v.event)
        .collect();
    if inputs.counter_verdicts.is_empty() {
        notes.push(
            "no counter verification results: counter-derived rates are not used and no pruning is applied".into(),
        );
    }

    // Pooled victim samples per scenario.
    let mut samples: BTreeMap<&str, (Vec<u64>, Vec<u32>)> = BTreeMap::new();
    for s in inputs.scenarios {
        let Some(ts) = valid.get(s.id.as_str()) else {
            notes.push(format!("scenario `{}` has no valid trace", s.id));
            continue;
        };
        let entry = samples.entry(s.id.as_str()).or_default();
        for t in ts {
            entry.0.extend(t.victim_durations());
            entry.1.push(t.header.rep);
        }
    }
    let mut profiles = BTreeMap::new();
    let mut built: BTreeMap<&str, ExecutionTimeProfile> = BTreeMap::new();
    for (id, (durations, _)) in &samples {
        if durations.is_empty() {
            notes.push(format!("scenario `{id}` has no victim samples"));
            continue;
        }
        let p = build_profile(durations)?;
        profiles.insert(id.to_string(), p.summary());
        built.insert(id, p);
    }

    let mut assessments = Vec::new();
    let mut contended_profiles: Vec<(String, String, ExecutionTimeProfile)> = Vec::new();
    let mut exports = Vec::new();
    let mut files = Vec::new();
    let mut sensitivity = SensitivityMatrix::default();
    for s in inputs.scenarios.iter().filter(|s| !s.is_isolation()) {
        let Some(base_id) = &s.baseline else {
            notes.push(format!("scenario `{}` has no baseline and was not assessed", s.id));
            continue;
        };
        let (Some((base, _)), Some((cont, reps))) = (samples.get(base_id.as_str()), samples.get(s.id.as_str())) else {
            notes.push(format!(
                "scenario `{}` lacks baseline or contended samples and was not assessed",
                s.id
            ));
            continue;
        };
        if base.is_empty() || cont.is_empty() {
            continue;
        }
        let (bp, cp) = build_paired_profiles(base, cont)?;
        let assessment = compare(&s.channel, &bp, &cp, &inputs.policy);
        let id = format!("assess-{}", s.id);
        let export = HistogramExport {
            assessment: id.clone(),
            baseline_csv: format!("histograms/{}.baseline.csv", s.id),
            contended_csv: format!("histograms/{}.contended.csv", s.id),
            svg: format!("plots/{}.svg", s.id),
        };
        files.push(ExportFile {
            path: export.baseline_csv.clone(),
            contents: histogram_csv(&bp.histogram),
        });
        files.push(ExportFile {
            path: export.contended_csv.clone(),
            contents: histogram_csv(&cp.histogram),
        });
        files.push(ExportFile {
            path: export.svg.clone(),
            contents: histogram_svg(
                &format!("{} vs {} ({})", s.victim.workload.label, adversary_label(s), s.channel),
                &bp.histogram,
                &cp.histogram,
            ),
        });
        exports.push(export);
        if s.phase == Phase::Platform {
            let rate = inputs.catalog.get(&s.channel).and_then(|ch| {
                let ts = valid.get(s.id.as_str())?;
                usage_events(ch, inputs.topology)
                    .into_iter()
                    .filter(|e| trusted.contains(e))
                    .find_map(|e| adversary_peak_rate(ts, e))
            });
            sensitivity.push(SensitivityCell {
                victim: s.victim.workload.label.clone(),
                adversary: adversary_label(s),
                channel: s.channel.clone(),
                scenario: s.id.clone(),
                repetitions: reps.clone(),
                adversary_peak_rate: rate,
                shift_factor: assessment.shift_factor,
                max_factor: assessment.max_factor,
                dispersion_factor: assessment.dispersion_factor,
                p_value: assessment.test.p_value,
                verdict: assessment.verdict,
            });
        }
        contended_profiles.push((s.victim.workload.label.clone(), s.channel.clone(), cp));
        assessments.push(AssessmentRecord {
            id,
            scenario: s.id.clone(),
            baseline_scenario: base_id.clone(),
            phase: s.phase,
            victim: s.victim.workload.label.clone(),
            adversaries: s.adversaries.iter().map(|p| p.workload.label.clone()).collect(),
            repetitions: reps.clone(),
            assessment,
        });
    }

    // Fingerprints: only trusted counter events count as observations.
    let mut fingerprints = Vec::new();
    for fp in inputs.fingerprints {
        let mut f = fp.clone();
        let untrusted: Vec<String> = f
            .rates
            .iter()
            .filter(|(_, r)| !trusted.contains(&r.event))
            .map(|(k, _)| k.clone())
            .collect();
        for k in untrusted {
            f.rates.remove(&k);
            f.unobserved.push(k);
        }
        f.unobserved.sort();
        f.unobserved.dedup();
        fingerprints.push(f);
    }
    fingerprints.sort_by(|a, b| a.workload.cmp(&b.workload));
    let mut pruned = Vec::new();
    for f in &fingerprints {
        let catalog =
            prune_catalog(inputs.catalog, f, &sensitivity).map_err(|e| AnalysisError::Reference(e.to_string()))?;
        pruned.push(PrunedCatalog {
            workload: f.workload.clone(),
            catalog,
        });
    }

    let mut partitioning = Vec::new();
    for ch in inputs.partitioned_channels {
        let (ids, list): (Vec<&str>, Vec<InterferenceAssessment>) = assessments
            .iter()
            .filter(|a| &a.assessment.channel == ch)
            .map(|a| (a.id.as_str(), a.assessment.clone()))
            .unzip();
        partitioning.push(match assess_partitioning(&list) {
            Ok(v) => PartitioningRecord {
                channel: ch.clone(),
                status: Some(v.status),
                violations: v.violations.iter().map(|&i| ids[i].to_string()).collect(),
                note: format!("{} assessments", list.len()),
            },
            Err(e) => PartitioningRecord {
                channel: ch.clone(),
                status: None,
                violations: Vec::new(),
                note: e.to_string(),
            },
        });
    }

    // WCET per victim workload with both isolation and contended evidence.
    let mut wcet = Vec::new();
    let mut labels: Vec<&str> = contended_profiles.iter().map(|(l, _, _)| l.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    for label in labels {
        let iso: Vec<u64> = inputs
            .scenarios
            .iter()
            .filter(|s| s.is_isolation() && s.victim.workload.label == label)
            .filter_map(|s| samples.get(s.id.as_str()))
            .flat_map(|(d, _)| d.iter().copied())
            .collect();
        if iso.is_empty() {
            continue;
        }
        let iso = build_profile(&iso)?;
        let kept = pruned.iter().find(|p| p.workload == label).map(|p| &p.catalog);
        let contended: Vec<(String, &ExecutionTimeProfile)> = contended_profiles
            .iter()
            .filter(|(l, ch, _)| l == label && kept.is_none_or(|k| k.get(ch).is_some()))
            .map(|(_, ch, p)| (ch.clone(), p))
            .collect();
        if contended.is_empty() {
            notes.push(format!("`{label}`: every tested channel was pruned; no WCET estimate"));
            continue;
        }
        let estimate = estimate_wcet(label, &iso, &contended, inputs.catalog)?;
        if !estimate.consistent {
            notes.push(format!(
                "`{label}`: WCET estimate {} ns is below the observed maximum {} ns",
                estimate.estimate_ns, estimate.observed_max_ns
            ));
        }
        wcet.push(estimate);
    }

    let mut requirements = Vec::new();
    for req in inputs.requirements {
        let allowed = Margin::from_fraction(req.max_margin);
        requirements.push(match wcet.iter().find(|w| w.workload == req.workload) {
            Some(est) => {
                let status = evaluate_requirement(req, est)?;
                RequirementResult {
                    id: req.id.clone(),
                    workload: req.workload.clone(),
                    allowed,
                    actual: Some(est.margin.total),
                    status,
                    note: format!(
                        "cumulative margin {} against allowed {allowed} over channels [{}]",
                        est.margin.total,
                        est.channels.join(", ")
                    ),
                }
            }
            None => RequirementResult {
                id: req.id.clone(),
                workload: req.workload.clone(),
                allowed,
                actual: None,
                status: RequirementStatus::Fail,
                note: "no WCET estimate: the workload lacks isolation or contended evidence".into(),
            },
        });
    }

    let doc = AnalysisDocument {
        tool_version: crate::TOOL_VERSION.to_string(),
        config_hash: inputs.config_hash.to_string(),
        policy: inputs.policy,
        traces: traces.iter().map(|t| trace_ref(t)).collect(),
        profiles,
        assessments,
        sensitivity,
        counter_verdicts: inputs.counter_verdicts.to_vec(),
        trusted_events: trusted.into_iter().collect(),
        fingerprints,
        pruned,
        partitioning,
        wcet,
        requirements,
        exports,
        notes,
    };
    Ok((doc, files))
}
