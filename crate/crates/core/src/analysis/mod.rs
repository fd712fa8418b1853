//! Execution-time profiles, baseline-vs-contended assessments, margins and
//! WCET bounds. Everything here is a pure function of its inputs.

mod document;
mod export;
pub mod ranktest;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::platform::ChannelCatalog;

pub use document::{
    analyze, AnalysisDocument, AnalysisInputs, AssessmentRecord, ExportFile, HistogramExport, LoadedTrace,
    PartitioningRecord, PrunedCatalog, TraceRef,
};
pub use export::{histogram_csv, histogram_svg};
pub use ranktest::{mann_whitney, RankTest};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("unknown reference: {0}")]
    Reference(String),
}

/// Upper bound on histogram bins.
pub const MAX_BINS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Freedman–Diaconis edges over `sorted` (ascending, non-empty).
    pub fn edges_for(sorted: &[u64]) -> Vec<f64> {
        let n = sorted.len();
        let (lo, hi) = (sorted[0] as f64, sorted[n - 1] as f64);
        if lo == hi {
            return vec![lo - 0.5, lo + 0.5];
        }
        let iqr = (nearest_rank(sorted, 0.75) - nearest_rank(sorted, 0.25)) as f64;
        let mut width = 2.0 * iqr / (n as f64).cbrt();
        if width <= 0.0 {
            width = (hi - lo) / (n as f64).sqrt().ceil();
        }
        let bins = (((hi - lo) / width).ceil() as usize).clamp(1, MAX_BINS);
        let step = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|i| lo + step * i as f64).collect();
        edges.push(hi);
        edges
    }

    pub fn with_edges(sorted: &[u64], edges: Vec<f64>) -> Self {
        let bins = edges.len() - 1;
        let (lo, hi) = (edges[0], edges[bins]);
        let mut counts = vec![0u64; bins];
        for &x in sorted {
            let x = x as f64;
            let idx = if x >= hi {
                bins - 1
            } else {
                (((x - lo) / (hi - lo)) * bins as f64).floor().max(0.0) as usize
            };
            counts[idx.min(bins - 1)] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Value at 1-based rank ceil(q * n) of an ascending slice, clamped to
/// [1, n]. A product within 1e-9 above an integer counts as that integer.
pub fn nearest_rank(sorted: &[u64], q: f64) -> u64 {
    let n = sorted.len();
    let x = q.clamp(0.0, 1.0) * n as f64;
    let rank = (x - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTimeProfile {
    sorted: Vec<u64>,
    pub min: u64,
    pub max: u64,
    pub mean: f64,
    pub std_dev: f64,
    pub histogram: Histogram,
}

impl ExecutionTimeProfile {
    pub fn n(&self) -> usize {
        self.sorted.len()
    }

    pub fn sorted(&self) -> &[u64] {
        &self.sorted
    }

    pub fn percentile(&self, q: f64) -> u64 {
        nearest_rank(&self.sorted, q)
    }

    pub fn iqr(&self) -> u64 {
        self.percentile(0.75) - self.percentile(0.25)
    }

    pub fn summary(&self) -> ProfileSummary {
        ProfileSummary {
            n: self.n() as u64,
            min: self.min,
            max: self.max,
            mean: self.mean,
            std_dev: self.std_dev,
            p25: self.percentile(0.25),
            p50: self.percentile(0.5),
            p75: self.percentile(0.75),
            p90: self.percentile(0.9),
            p95: self.percentile(0.95),
            p99: self.percentile(0.99),
            histogram: self.histogram.clone(),
        }
    }

    fn with_histogram_edges(mut self, edges: Vec<f64>) -> Self {
        self.histogram = Histogram::with_edges(&self.sorted, edges);
        self
    }
}

/// Serializable digest of a profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub n: u64,
    pub min: u64,
    pub max: u64,
    pub mean: f64,
    pub std_dev: f64,
    pub p25: u64,
    pub p50: u64,
    pub p75: u64,
    pub p90: u64,
    pub p95: u64,
    pub p99: u64,
    pub histogram: Histogram,
}

pub fn build_profile(samples: &[u64]) -> Result<ExecutionTimeProfile, AnalysisError> {
    if samples.is_empty() {
        return Err(AnalysisError::Argument("empty sample list".into()));
    }
    if samples.contains(&0) {
        return Err(AnalysisError::Argument("durations must be positive".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let sum: u128 = sorted.iter().map(|&x| x as u128).sum();
    let mean = sum as f64 / n;
    let std_dev = if sorted.len() > 1 {
        let ss: f64 = sorted.iter().map(|&x| (x as f64 - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let histogram = Histogram::with_edges(&sorted, Histogram::edges_for(&sorted));
    Ok(ExecutionTimeProfile {
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        mean,
        std_dev,
        histogram,
        sorted,
    })
}

/// Profiles of a baseline/contended pair whose histograms share edges
/// computed from the pooled samples.
pub fn build_paired_profiles(
    baseline: &[u64],
    contended: &[u64],
) -> Result<(ExecutionTimeProfile, ExecutionTimeProfile), AnalysisError> {
    let b = build_profile(baseline)?;
    let c = build_profile(contended)?;
    let mut pooled: Vec<u64> = b.sorted.iter().chain(&c.sorted).copied().collect();
    pooled.sort_unstable();
    let edges = Histogram::edges_for(&pooled);
    Ok((b.with_histogram_edges(edges.clone()), c.with_histogram_edges(edges)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionPolicy {
    /// Effect-size gate: a factor must exceed `1 + delta`.
    pub delta: f64,
    /// Rank-test significance level.
    pub alpha: f64,
}

impl Default for DetectionPolicy {
    fn default() -> Self {
        DetectionPolicy {
            delta: 0.05,
            alpha: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChannelVerdict {
    Present,
    NotDetected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatTest {
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
    pub rejects: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceAssessment {
    pub channel: String,
    pub baseline: ProfileSummary,
    pub contended: ProfileSummary,
    /// contended p95 / baseline p95
    pub shift_factor: f64,
    /// contended max / baseline max
    pub max_factor: f64,
    /// contended IQR / baseline IQR
    pub dispersion_factor: f64,
    pub test: StatTest,
    pub verdict: ChannelVerdict,
}

/// IQR ratio. Both IQRs are floored at 1e-9 of the baseline median so a
/// degenerate baseline does not divide by zero; the floor scales with the
/// data.
fn dispersion(baseline: &ExecutionTimeProfile, contended: &ExecutionTimeProfile) -> f64 {
    let floor = 1e-9 * baseline.percentile(0.5) as f64;
    let b = (baseline.iqr() as f64).max(floor);
    let c = (contended.iqr() as f64).max(floor);
    c / b
}

/// Channel verdict from a baseline/contended pair: PRESENT iff the p95
/// shift or the IQR ratio exceeds `1 + delta` and the rank test rejects
/// equality at `alpha`.
pub fn compare(
    channel: &str,
    baseline: &ExecutionTimeProfile,
    contended: &ExecutionTimeProfile,
    policy: &DetectionPolicy,
) -> InterferenceAssessment {
    let shift_factor = contended.percentile(0.95) as f64 / baseline.percentile(0.95) as f64;
    let max_factor = contended.max as f64 / baseline.max as f64;
    let dispersion_factor = dispersion(baseline, contended);
    let rt = mann_whitney(baseline.sorted(), contended.sorted());
    let rejects = rt.p_value <= policy.alpha;
    let gate = 1.0 + policy.delta;
    let effect = shift_factor > gate || dispersion_factor > gate;
    InterferenceAssessment {
        channel: channel.to_string(),
        baseline: baseline.summary(),
        contended: contended.summary(),
        shift_factor,
        max_factor,
        dispersion_factor,
        test: StatTest {
            statistic: rt.statistic,
            p_value: rt.p_value,
            exact: rt.exact,
            rejects,
        },
        verdict: if effect && rejects {
            ChannelVerdict::Present
        } else {
            ChannelVerdict::NotDetected
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PartitioningStatus {
    Robust,
    NotRobust,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitioningVerdict {
    pub channel: String,
    pub status: PartitioningStatus,
    /// Indices of the assessments that showed interference.
    pub violations: Vec<usize>,
}

pub fn assess_partitioning(assessments: &[InterferenceAssessment]) -> Result<PartitioningVerdict, AnalysisError> {
    let first = assessments
        .first()
        .ok_or_else(|| AnalysisError::Argument("no assessments: absence of evidence is not robustness".into()))?;
    if let Some(other) = assessments.iter().find(|a| a.channel != first.channel) {
        return Err(AnalysisError::Argument(format!(
            "assessments target both `{}` and `{}`",
            first.channel, other.channel
        )));
    }
    let violations: Vec<usize> = assessments
        .iter()
        .enumerate()
        .filter(|(_, a)| a.verdict == ChannelVerdict::Present)
        .map(|(i, _)| i)
        .collect();
    Ok(PartitioningVerdict {
        channel: first.channel.clone(),
        status: if violations.is_empty() {
            PartitioningStatus::Robust
        } else {
            PartitioningStatus::NotRobust
        },
        violations,
    })
}

/// A non-negative timing margin in parts per billion. Fixed point keeps
/// margin sums exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Margin(u64);

pub const PPB: u64 = 1_000_000_000;

impl Margin {
    pub const ZERO: Margin = Margin(0);

    pub fn from_ppb(ppb: u64) -> Self {
        Margin(ppb)
    }

    /// Nearest representable margin; negative fractions clamp to zero.
    pub fn from_fraction(f: f64) -> Self {
        Margin((f.max(0.0) * PPB as f64).round() as u64)
    }

    /// Margin of `observed` over `reference`, rounded up; zero when
    /// `observed <= reference`.
    pub fn over(observed: u64, reference: u64) -> Self {
        assert!(reference > 0, "reference must be positive");
        let excess = observed.saturating_sub(reference) as u128;
        Margin((excess * PPB as u128).div_ceil(reference as u128) as u64)
    }

    pub fn ppb(self) -> u64 {
        self.0
    }

    pub fn fraction(self) -> f64 {
        self.0 as f64 / PPB as f64
    }

    /// `base * (1 + self)`, rounded up.
    pub fn apply(self, base: u64) -> u64 {
        ((base as u128 * (PPB as u128 + self.0 as u128)).div_ceil(PPB as u128)) as u64
    }
}

impl std::ops::Add for Margin {
    type Output = Margin;
    fn add(self, rhs: Margin) -> Margin {
        Margin(self.0.saturating_add(rhs.0))
    }
}

impl fmt::Display for Margin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}%", self.fraction() * 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CumulativeMargin {
    pub total: Margin,
    /// Summed margin per coupling group.
    pub groups: BTreeMap<String, Margin>,
}

/// Sums margins within a coupling group and takes the maximum across groups.
pub fn combine_margins(
    entries: &[(String, Margin)],
    catalog: &ChannelCatalog,
) -> Result<CumulativeMargin, AnalysisError> {
    let mut groups: BTreeMap<String, Margin> = BTreeMap::new();
    for (id, margin) in entries {
        let ch = catalog
            .get(id)
            .ok_or_else(|| AnalysisError::Reference(format!("channel `{id}` is not in the catalog")))?;
        let slot = groups.entry(ch.coupling_group.clone()).or_default();
        *slot = *slot + *margin;
    }
    let total = groups.values().copied().max().unwrap_or(Margin::ZERO);
    Ok(CumulativeMargin { total, groups })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WcetEstimate {
    pub workload: String,
    pub isolation_max_ns: u64,
    /// Highest contended maximum across all tested channels.
    pub observed_max_ns: u64,
    pub per_channel: BTreeMap<String, Margin>,
    pub margin: CumulativeMargin,
    pub estimate_ns: u64,
    /// Channels with a non-zero margin.
    pub channels: Vec<String>,
    /// `estimate_ns >= observed_max_ns`.
    pub consistent: bool,
}

/// Isolation high-water mark scaled by the combined per-channel margins
/// (contended max over isolation max).
pub fn estimate_wcet(
    workload: &str,
    isolation: &ExecutionTimeProfile,
    contended: &[(String, &ExecutionTimeProfile)],
    catalog: &ChannelCatalog,
) -> Result<WcetEstimate, AnalysisError> {
    if contended.is_empty() {
        return Err(AnalysisError::Argument(format!(
            "no contended profile for `{workload}`"
        )));
    }
    let mut per_channel: BTreeMap<String, Margin> = BTreeMap::new();
    for (channel, profile) in contended {
        let m = Margin::over(profile.max, isolation.max);
        let slot = per_channel.entry(channel.clone()).or_default();
        *slot = (*slot).max(m);
    }
    let entries: Vec<(String, Margin)> = per_channel.iter().map(|(k, v)| (k.clone(), *v)).collect();
    let margin = combine_margins(&entries, catalog)?;
    let observed_max_ns = contended.iter().map(|(_, p)| p.max).max().unwrap_or(0);
    let estimate_ns = margin.total.apply(isolation.max);
    Ok(WcetEstimate {
        workload: workload.to_string(),
        isolation_max_ns: isolation.max,
        observed_max_ns,
        channels: per_channel
            .iter()
            .filter(|(_, m)| m.ppb() > 0)
            .map(|(k, _)| k.clone())
            .collect(),
        per_channel,
        consistent: estimate_ns >= observed_max_ns,
        margin,
        estimate_ns,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Requirement {
    pub id: String,
    pub workload: String,
    /// Allowed cumulative WCET margin, as a fraction.
    pub max_margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RequirementStatus {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementResult {
    pub id: String,
    pub workload: String,
    pub allowed: Margin,
    pub actual: Option<Margin>,
    pub status: RequirementStatus,
    pub note: String,
}

/// PASS iff the cumulative margin is at most the allowed margin.
pub fn evaluate_requirement(req: &Requirement, estimate: &WcetEstimate) -> Result<RequirementStatus, AnalysisError> {
    if req.workload != estimate.workload {
        return Err(AnalysisError::Reference(format!(
            "requirement `{}` is for `{}`, estimate is for `{}`",
            req.id, req.workload, estimate.workload
        )));
    }
    Ok(if estimate.margin.total <= Margin::from_fraction(req.max_margin) {
        RequirementStatus::Pass
    } else {
        RequirementStatus::Fail
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCell {
    pub victim: String,
    pub adversary: String,
    pub channel: String,
    pub scenario: String,
    pub repetitions: Vec<u32>,
    /// Peak use rate of the channel by the adversaries (events/ms), when a
    /// trusted counter observed it.
    pub adversary_peak_rate: Option<f64>,
    pub shift_factor: f64,
    pub max_factor: f64,
    pub dispersion_factor: f64,
    pub p_value: f64,
    pub verdict: ChannelVerdict,
}

/// Victim kernels (rows) against adversary configurations (columns).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SensitivityMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    cells: Vec<SensitivityCell>,
}

impl SensitivityMatrix {
    pub fn push(&mut self, cell: SensitivityCell) {
        if !self.rows.contains(&cell.victim) {
            self.rows.push(cell.victim.clone());
        }
        if !self.columns.contains(&cell.adversary) {
            self.columns.push(cell.adversary.clone());
        }
        self.cells.push(cell);
    }

    pub fn cells(&self) -> &[SensitivityCell] {
        &self.cells
    }

    pub fn cell(&self, victim: &str, adversary: &str) -> Option<&SensitivityCell> {
        self.cells
            .iter()
            .find(|c| c.victim == victim && c.adversary == adversary)
    }

    /// Per channel, the highest adversary use rate that produced no
    /// measurable interference.
    pub fn no_effect_thresholds(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for c in &self.cells {
            if c.verdict != ChannelVerdict::NotDetected {
                continue;
            }
            if let Some(rate) = c.adversary_peak_rate {
                let slot = out.entry(c.channel.clone()).or_insert(rate);
                *slot = slot.max(rate);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::platform::{ChannelCatalog, InterferenceChannel, ResourceKind};
    use proptest::prelude::*;

    /// Brute-force nearest rank: sort, index at ceil(q n) with exact
    /// rational arithmetic on q = num / den.
    fn oracle_rank(samples: &[u64], num: usize, den: usize) -> u64 {
        let mut s = samples.to_vec();
        s.sort();
        let n = s.len();
        let rank = ((num * n).div_ceil(den)).clamp(1, n);
        s[rank - 1]
    }

    pub(crate) fn catalog(groups: &[(&str, &str)]) -> ChannelCatalog {
        ChannelCatalog {
            channels: groups
                .iter()
                .map(|(id, g)| InterferenceChannel {
                    id: id.to_string(),
                    resource: ResourceKind::SharedCache,
                    scope: [0, 1].into_iter().collect(),
                    coupling_group: g.to_string(),
                    cache_level: Some(2),
                })
                .collect(),
            ..ChannelCatalog::default()
        }
    }

    fn profile(samples: &[u64]) -> ExecutionTimeProfile {
        build_profile(samples).unwrap()
    }

    #[test]
    fn singleton_profile() {
        let p = profile(&[5]);
        assert_eq!((p.min, p.max, p.mean, p.percentile(0.95)), (5, 5, 5.0, 5));
        assert_eq!(p.histogram.total(), 1);
    }

    #[test]
    fn p95_of_one_to_hundred() {
        let s: Vec<u64> = (1..=100).collect();
        assert_eq!(oracle_rank(&s, 95, 100), 95);
        assert_eq!(profile(&s).percentile(0.95), 95);
    }

    #[test]
    fn heavy_tail_mean() {
        let p = profile(&[1, 2, 3, 4, 100]);
        assert_eq!(p.max, 100);
        assert_eq!(p.mean, 22.0);
    }

    #[test]
    fn empty_and_zero_rejected() {
        assert!(build_profile(&[]).is_err());
        assert!(build_profile(&[3, 0]).is_err());
    }

    #[test]
    fn paired_histograms_share_edges() {
        let (b, c) = build_paired_profiles(&[10, 11, 12, 13, 14], &[20, 25, 30, 35]).unwrap();
        assert_eq!(b.histogram.edges, c.histogram.edges);
        assert_eq!(b.histogram.total(), 5);
        assert_eq!(c.histogram.total(), 4);
        assert_eq!(b.histogram.edges[0], 10.0);
        assert_eq!(*b.histogram.edges.last().unwrap(), 35.0);
    }

    proptest! {
        #[test]
        fn profile_invariants(samples in prop::collection::vec(1u64..1_000_000, 1..300)) {
            let p = profile(&samples);
            prop_assert!(p.min as f64 <= p.mean && p.mean <= p.max as f64);
            prop_assert_eq!(p.histogram.total(), samples.len() as u64);
            prop_assert_eq!(p.percentile(1.0), p.max);
            prop_assert_eq!(p.percentile(1.0 / samples.len() as f64), p.min);
            let mut last = 0;
            for q in 0..=100 {
                let v = p.percentile(q as f64 / 100.0);
                prop_assert!(v >= last);
                last = v;
            }
        }

        #[test]
        fn percentiles_match_oracle(samples in prop::collection::vec(1u64..50, 1..20), q in 1usize..=100) {
            prop_assert_eq!(profile(&samples).percentile(q as f64 / 100.0), oracle_rank(&samples, q, 100));
        }

        #[test]
        fn compare_is_scale_equivariant(
            base in prop::collection::vec(100u64..200, 5..60),
            cont in prop::collection::vec(100u64..260, 5..60),
            k in 2u64..1000,
        ) {
            let policy = DetectionPolicy::default();
            let a = compare("x", &profile(&base), &profile(&cont), &policy);
            let scaled = |v: &[u64]| v.iter().map(|x| x * k).collect::<Vec<_>>();
            let b = compare("x", &profile(&scaled(&base)), &profile(&scaled(&cont)), &policy);
            prop_assert_eq!(a.verdict, b.verdict);
            prop_assert!((a.shift_factor - b.shift_factor).abs() <= 1e-12 * a.shift_factor);
            prop_assert!((a.max_factor - b.max_factor).abs() <= 1e-12 * a.max_factor);
            prop_assert!((a.dispersion_factor - b.dispersion_factor).abs() <= 1e-9 * a.dispersion_factor);
            prop_assert_eq!(a.test.p_value, b.test.p_value);
        }

        #[test]
        fn combine_is_monotone(
            margins in prop::collection::vec(0u64..500_000_000, 1..6),
            bump_at in 0usize..6,
            bump in 0u64..100_000_000,
        ) {
            let groups = ["g0", "g1", "g0", "g2", "g1", "g0"];
            let ids = ["a", "b", "c", "d", "e", "f"];
            let cat = catalog(&ids.iter().zip(groups).map(|(i, g)| (*i, g)).collect::<Vec<_>>());
            let entries: Vec<(String, Margin)> =
                margins.iter().enumerate().map(|(i, &m)| (ids[i].to_string(), Margin::from_ppb(m))).collect();
            let base = combine_margins(&entries, &cat).unwrap().total;
            let mut bumped = entries.clone();
            let i = bump_at % bumped.len();
            bumped[i].1 = bumped[i].1 + Margin::from_ppb(bump);
            prop_assert!(combine_margins(&bumped, &cat).unwrap().total >= base);
            let single = combine_margins(&entries[..1], &cat).unwrap().total;
            prop_assert_eq!(single, entries[0].1);
        }
    }

    #[test]
    fn identical_profiles_not_detected() {
        let s: Vec<u64> = (0..200).map(|i| 1000 + (i * 37) % 101).collect();
        let a = compare("c", &profile(&s), &profile(&s), &DetectionPolicy::default());
        assert_eq!(a.verdict, ChannelVerdict::NotDetected);
        assert_eq!(a.shift_factor, 1.0);
    }

    #[test]
    fn tripled_profile_present() {
        let s: Vec<u64> = (0..200).map(|i| 1000 + (i * 37) % 101).collect();
        let t: Vec<u64> = s.iter().map(|x| x * 3).collect();
        let a = compare("c", &profile(&s), &profile(&t), &DetectionPolicy::default());
        assert_eq!(a.verdict, ChannelVerdict::Present);
        assert_eq!(a.shift_factor, 3.0);
        assert_eq!(a.max_factor, 3.0);
    }

    #[test]
    fn partitioning_verdicts() {
        let s: Vec<u64> = (0..50).map(|i| 100 + i % 7).collect();
        let slow: Vec<u64> = s.iter().map(|x| x * 2).collect();
        let pol = DetectionPolicy::default();
        let quiet = compare("p", &profile(&s), &profile(&s), &pol);
        let loud = compare("p", &profile(&s), &profile(&slow), &pol);
        let all_quiet = vec![quiet.clone(); 5];
        assert_eq!(
            assess_partitioning(&all_quiet).unwrap().status,
            PartitioningStatus::Robust
        );
        let mut one_loud = all_quiet.clone();
        one_loud[3] = loud;
        let v = assess_partitioning(&one_loud).unwrap();
        assert_eq!(v.status, PartitioningStatus::NotRobust);
        assert_eq!(v.violations, vec![3]);
        assert!(assess_partitioning(&[]).is_err());
        let mut mixed = all_quiet;
        mixed[0].channel = "other".into();
        assert!(assess_partitioning(&mixed).is_err());
    }

    #[test]
    fn margin_combination_worked_example() {
        let pct = |p: u64| Margin::from_ppb(p * PPB / 100);
        let entries = vec![("A".to_string(), pct(5)), ("B".to_string(), pct(7))];
        let independent = catalog(&[("A", "bus-a"), ("B", "bus-b")]);
        assert_eq!(combine_margins(&entries, &independent).unwrap().total, pct(7));
        let common = catalog(&[("A", "bus"), ("B", "bus")]);
        assert_eq!(combine_margins(&entries, &common).unwrap().total, pct(12));
        assert_eq!(combine_margins(&[], &common).unwrap().total, Margin::ZERO);
        assert!(combine_margins(&[("Z".into(), pct(1))], &common).is_err());
        assert_eq!(Margin::from_fraction(0.05), pct(5));
    }

    #[test]
    fn wcet_examples() {
        let iso = profile(&[90_000, 100_000]);
        let c130 = profile(&[130_000]);
        let cat = catalog(&[("A", "bus")]);
        let e = estimate_wcet("app", &iso, &[("A".into(), &c130)], &cat).unwrap();
        assert_eq!(e.margin.total, Margin::from_ppb(300_000_000));
        assert_eq!(e.estimate_ns, 130_000);

        let c105 = profile(&[105_000]);
        let c107 = profile(&[107_000]);
        let independent = catalog(&[("A", "x"), ("B", "y")]);
        let same = catalog(&[("A", "bus"), ("B", "bus")]);
        let pair = [("A".to_string(), &c105), ("B".to_string(), &c107)];
        assert_eq!(
            estimate_wcet("app", &iso, &pair, &independent).unwrap().estimate_ns,
            107_000
        );
        let e = estimate_wcet("app", &iso, &pair, &same).unwrap();
        assert_eq!(e.estimate_ns, 112_000);
        assert!(e.consistent);
        assert!(estimate_wcet("app", &iso, &[], &same).is_err());

        let faster = profile(&[50_000]);
        let e = estimate_wcet("app", &iso, &[("A".into(), &faster)], &cat).unwrap();
        assert_eq!(e.estimate_ns, iso.max);
    }

    #[test]
    fn requirement_boundaries() {
        let cat = catalog(&[("A", "bus")]);
        let iso = profile(&[100_000]);
        let at = |ns: u64| {
            let c = profile(&[ns]);
            estimate_wcet("app", &iso, &[("A".into(), &c)], &cat).unwrap()
        };
        let req = |m: f64| Requirement {
            id: "R1".into(),
            workload: "app".into(),
            max_margin: m,
        };
        assert_eq!(
            evaluate_requirement(&req(0.10), &at(107_000)).unwrap(),
            RequirementStatus::Pass
        );
        assert_eq!(
            evaluate_requirement(&req(0.10), &at(112_000)).unwrap(),
            RequirementStatus::Fail
        );
        assert_eq!(
            evaluate_requirement(&req(0.0), &at(100_000)).unwrap(),
            RequirementStatus::Pass
        );
        let mut other = req(0.1);
        other.workload = "other".into();
        assert!(evaluate_requirement(&other, &at(100_000)).is_err());
    }

    #[test]
    fn detection_power_smoke() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let policy = DetectionPolicy::default();
        let mut draw = |scale: f64| -> Vec<u64> {
            (0..1000)
                .map(|_| (scale * (10_000.0 + 500.0 * rng.random::<f64>())) as u64)
                .collect()
        };
        let mut hits = 0;
        let mut false_hits = 0;
        for _ in 0..20 {
            let b = draw(1.0);
            let c = draw(1.10);
            let same = draw(1.0);
            if compare("c", &profile(&b), &profile(&c), &policy).verdict == ChannelVerdict::Present {
                hits += 1;
            }
            if compare("c", &profile(&b), &profile(&same), &policy).verdict == ChannelVerdict::Present {
                false_hits += 1;
            }
        }
        assert_eq!(hits, 20);
        assert_eq!(false_hits, 0);
    }
}
