//! Target machine description and the interference channels it implies.
//!
//! A [`Topology`] is loaded from a JSON document and validated. The default
//! [`ChannelCatalog`] is derived from it by a fixed enumeration rule, and can
//! later be narrowed with [`prune_catalog`] once an application's resource
//! usage is known.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::SensitivityMatrix;
use crate::harness::ResourceUsageProfile;

pub type CoreId = u32;

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("topology parse error at `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("invalid topology: {0}")]
    Validation(String),
    #[error("unknown channel id `{0}`")]
    UnknownChannel(String),
    #[error("channel `{0}` does not resolve to a cache level or memory in the topology")]
    Unresolvable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheLevel {
    pub level: u32,
    pub capacity: u64,
    pub associativity: u32,
    pub shared_by: BTreeSet<CoreId>,
}

impl CacheLevel {
    pub fn is_shared(&self) -> bool {
        self.shared_by.len() >= 2
    }
}

/// Declared banking of one cache level. `cache_level: 0` declares DRAM banks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankSpec {
    pub cache_level: u32,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(rename = "cores")]
    pub core_ids: Vec<CoreId>,
    pub line_size: u64,
    #[serde(rename = "caches")]
    pub cache_levels: Vec<CacheLevel>,
    #[serde(rename = "dram_nodes")]
    pub dram_node_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub banks: Option<BankSpec>,
}

impl Topology {
    pub fn validate(&self) -> Result<(), PlatformError> {
        let invalid = |msg: String| Err(PlatformError::Validation(msg));
        if self.core_ids.is_empty() {
            return invalid("core_ids is empty".into());
        }
        let cores: BTreeSet<CoreId> = self.core_ids.iter().copied().collect();
        if cores.len() != self.core_ids.len() {
            return invalid("core_ids contains duplicates".into());
        }
        if !self.line_size.is_power_of_two() {
            return invalid("line_size not a power of two".into());
        }
        if self.line_size < 16 {
            return invalid(format!("line_size {} is below 16 bytes", self.line_size));
        }
        if self.dram_node_count == 0 {
            return invalid("dram_nodes must be positive".into());
        }
        for (i, c) in self.cache_levels.iter().enumerate() {
            if c.level == 0 {
                return invalid(format!("caches[{i}]: level must be >= 1"));
            }
            if c.associativity == 0 {
                return invalid(format!("caches[{i}]: associativity must be positive"));
            }
            let unit = self.line_size * u64::from(c.associativity);
            if c.capacity == 0 || c.capacity % unit != 0 {
                return invalid(format!(
                    "caches[{i}]: capacity {} is not a positive multiple of line_size x associativity ({unit})",
                    c.capacity
                ));
            }
            if c.shared_by.is_empty() {
                return invalid(format!("caches[{i}]: shared_by is empty"));
            }
            if let Some(stray) = c.shared_by.iter().find(|id| !cores.contains(id)) {
                return invalid(format!("caches[{i}]: shared_by names unknown core {stray}"));
            }
        }
        for &core in &cores {
            let mut path: Vec<&CacheLevel> = self.caches_of(core).collect();
            path.sort_by_key(|c| c.level);
            for pair in path.windows(2) {
                if pair[0].level == pair[1].level {
                    return invalid(format!(
                        "core {core} is covered by two caches at level {}",
                        pair[0].level
                    ));
                }
                if pair[0].capacity > pair[1].capacity {
                    return invalid(format!(
                        "core {core}: L{} capacity exceeds L{} capacity",
                        pair[0].level, pair[1].level
                    ));
                }
            }
        }
        if let Some(b) = self.banks {
            if b.count == 0 {
                return invalid("banks.count must be positive".into());
            }
            if b.cache_level != 0 && !self.cache_levels.iter().any(|c| c.level == b.cache_level) {
                return invalid(format!("banks.cache_level {} has no cache", b.cache_level));
            }
        }
        Ok(())
    }

    /// Caches on `core`'s memory path, in declaration order.
    pub fn caches_of(&self, core: CoreId) -> impl Iterator<Item = &CacheLevel> {
        self.cache_levels.iter().filter(move |c| c.shared_by.contains(&core))
    }

    /// The cache at `level` serving `core`, if any.
    pub fn cache_at(&self, core: CoreId, level: u32) -> Option<&CacheLevel> {
        self.caches_of(core).find(|c| c.level == level)
    }

    pub fn has_private_cache(&self, core: CoreId) -> bool {
        self.caches_of(core).any(|c| !c.is_shared())
    }

    pub fn core_set(&self) -> BTreeSet<CoreId> {
        self.core_ids.iter().copied().collect()
    }
}

/// Parses and validates a topology document.
pub fn load_topology(source: &str) -> Result<Topology, PlatformError> {
    let de = &mut serde_json::Deserializer::from_str(source);
    let topology: Topology = serde_path_to_error::deserialize(de).map_err(|e| PlatformError::Parse {
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    topology.validate()?;
    Ok(topology)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ResourceKind {
    PrivateCacheCoherency,
    SharedCache,
    CacheBank,
    DramBandwidth,
    DramBank,
    Interconnect,
}

impl ResourceKind {
    pub fn is_memory_side(self) -> bool {
        matches!(self, ResourceKind::DramBandwidth | ResourceKind::DramBank)
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ResourceKind::PrivateCacheCoherency => "PRIVATE_CACHE_COHERENCY",
            ResourceKind::SharedCache => "SHARED_CACHE",
            ResourceKind::CacheBank => "CACHE_BANK",
            ResourceKind::DramBandwidth => "DRAM_BANDWIDTH",
            ResourceKind::DramBank => "DRAM_BANK",
            ResourceKind::Interconnect => "INTERCONNECT",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterferenceChannel {
    pub id: String,
    pub resource: ResourceKind,
    pub scope: BTreeSet<CoreId>,
    pub coupling_group: String,
    /// Cache level the channel lives at (for coherency: the outermost
    /// private level of the scope). `None` for memory-side and interconnect
    /// channels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_level: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChannelCatalog {
    pub channels: Vec<InterferenceChannel>,
    /// Why each channel was included or excluded, keyed by channel id.
    pub rationale: BTreeMap<String, String>,
    /// Channels removed by pruning, kept for the audit trail.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<InterferenceChannel>,
}

impl ChannelCatalog {
    pub fn get(&self, id: &str) -> Option<&InterferenceChannel> {
        self.channels.iter().find(|c| c.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.channels.iter().map(|c| c.id.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn validate(&self) -> Result<(), PlatformError> {
        let mut seen = BTreeSet::new();
        for c in &self.channels {
            if !seen.insert(c.id.as_str()) {
                return Err(PlatformError::Validation(format!("duplicate channel id `{}`", c.id)));
            }
            if c.scope.len() < 2 {
                return Err(PlatformError::Validation(format!(
                    "channel `{}` has scope of {} core(s); at least 2 required",
                    c.id,
                    c.scope.len()
                )));
            }
        }
        Ok(())
    }
}

fn scope_tag(scope: &BTreeSet<CoreId>) -> String {
    scope.iter().map(|c| format!("c{c}")).collect()
}

/// Channels reached over the same set of cores share an access path.
fn path_group(scope: &BTreeSet<CoreId>) -> String {
    format!("path-{}", scope_tag(scope))
}

/// Enumerates the interference channels implied by `t`.
///
/// One shared-cache channel per cache with two or more sharers, one
/// coherency channel per group of private-cache cores backed by a common
/// level, one DRAM bandwidth channel per node and one interconnect channel
/// over all cores. Bank channels appear only when the document declares
/// bank counts.
pub fn derive_default_catalog(t: &Topology) -> ChannelCatalog {
    let all = t.core_set();
    let mut catalog = ChannelCatalog::default();
    if all.len() < 2 {
        return catalog;
    }
    let push = |catalog: &mut ChannelCatalog, ch: InterferenceChannel, why: String| {
        if catalog.get(&ch.id).is_none() {
            catalog.rationale.insert(ch.id.clone(), why);
            catalog.channels.push(ch);
        }
    };

    let mut shared: Vec<&CacheLevel> = t.cache_levels.iter().filter(|c| c.is_shared()).collect();
    shared.sort_by(|a, b| (a.level, &a.shared_by).cmp(&(b.level, &b.shared_by)));

    // Coherency groups: private-cache cores under each shared level, or
    // under memory when nothing is shared.
    let mut coherency_groups: Vec<(String, BTreeSet<CoreId>)> = shared
        .iter()
        .map(|s| {
            let group: BTreeSet<CoreId> = s
                .shared_by
                .iter()
                .copied()
                .filter(|&c| t.caches_of(c).any(|p| !p.is_shared() && p.level < s.level))
                .collect();
            (format!("l{}", s.level), group)
        })
        .collect();
    if shared.is_empty() {
        let group: BTreeSet<CoreId> = all.iter().copied().filter(|&c| t.has_private_cache(c)).collect();
        coherency_groups.push(("mem".into(), group));
    }
    let mut seen_groups = BTreeSet::new();
    for (backing, group) in coherency_groups {
        if group.len() < 2 || !seen_groups.insert(group.clone()) {
            continue;
        }
        let private_level = group
            .iter()
            .filter_map(|&c| t.caches_of(c).filter(|p| !p.is_shared()).map(|p| p.level).max())
            .min();
        let id = format!("coherency-{backing}-{}", scope_tag(&group));
        let why = format!(
            "cores {:?} hold private caches backed by {backing}; writes to shared lines raise snoop traffic",
            group
        );
        push(
            &mut catalog,
            InterferenceChannel {
                id,
                resource: ResourceKind::PrivateCacheCoherency,
                coupling_group: path_group(&group),
                scope: group,
                cache_level: private_level,
            },
            why,
        );
    }

    for s in &shared {
        let id = format!("shared-l{}-{}", s.level, scope_tag(&s.shared_by));
        let why = format!(
            "L{} ({} bytes) is shared by cores {:?}; co-runners evict each other's lines",
            s.level, s.capacity, s.shared_by
        );
        push(
            &mut catalog,
            InterferenceChannel {
                id,
                resource: ResourceKind::SharedCache,
                scope: s.shared_by.clone(),
                coupling_group: path_group(&s.shared_by),
                cache_level: Some(s.level),
            },
            why,
        );
        if let Some(b) = t.banks {
            if b.cache_level == s.level && b.count >= 2 {
                let id = format!("bank-l{}-{}", s.level, scope_tag(&s.shared_by));
                let why = format!(
                    "L{} is declared as {} banks; accesses to one bank serialize",
                    s.level, b.count
                );
                push(
                    &mut catalog,
                    InterferenceChannel {
                        id,
                        resource: ResourceKind::CacheBank,
                        scope: s.shared_by.clone(),
                        coupling_group: path_group(&s.shared_by),
                        cache_level: Some(s.level),
                    },
                    why,
                );
            }
        }
    }

    let memory_group = path_group(&all);
    for node in 0..t.dram_node_count {
        push(
            &mut catalog,
            InterferenceChannel {
                id: format!("dram-bw-n{node}"),
                resource: ResourceKind::DramBandwidth,
                scope: all.clone(),
                coupling_group: memory_group.clone(),
                cache_level: None,
            },
            format!("DRAM node {node} is reachable from all cores; bandwidth is shared"),
        );
        if let Some(b) = t.banks {
            if b.cache_level == 0 && b.count >= 2 {
                push(
                    &mut catalog,
                    InterferenceChannel {
                        id: format!("dram-bank-n{node}"),
                        resource: ResourceKind::DramBank,
                        scope: all.clone(),
                        coupling_group: memory_group.clone(),
                        cache_level: None,
                    },
                    format!(
                        "DRAM node {node} is declared as {} banks; row conflicts across cores",
                        b.count
                    ),
                );
            }
        }
    }
    push(
        &mut catalog,
        InterferenceChannel {
            id: "interconnect".into(),
            resource: ResourceKind::Interconnect,
            scope: all.clone(),
            coupling_group: memory_group,
            cache_level: None,
        },
        "all cores reach shared memory through a common interconnect".into(),
    );

    // Partial sharing of a path is surfaced in text; grouping is by full identity.
    let groups: BTreeSet<String> = catalog.channels.iter().map(|c| c.coupling_group.clone()).collect();
    if groups.len() > 1 {
        for ch in &catalog.channels {
            let overlaps: Vec<&str> = catalog
                .channels
                .iter()
                .filter(|o| o.coupling_group != ch.coupling_group && !o.scope.is_disjoint(&ch.scope))
                .map(|o| o.id.as_str())
                .collect();
            if !overlaps.is_empty() {
                if let Some(text) = catalog.rationale.get_mut(&ch.id) {
                    text.push_str(&format!(
                        "; partially shares its path with {} (different coupling group)",
                        overlaps.join(", ")
                    ));
                }
            }
        }
    }
    catalog
}

/// Removes channels the fingerprinted workload uses less intensely than a
/// generator configuration that produced no measurable interference.
///
/// Memory-side channels are kept while any shared cache channel remains:
/// co-runners can evict the working set even when it fits in cache alone.
pub fn prune_catalog(
    catalog: &ChannelCatalog,
    fingerprint: &ResourceUsageProfile,
    null_sensitivity: &SensitivityMatrix,
) -> Result<ChannelCatalog, PlatformError> {
    for id in fingerprint.rates.keys().chain(fingerprint.unobserved.iter()) {
        if catalog.get(id).is_none() {
            return Err(PlatformError::UnknownChannel(id.clone()));
        }
    }
    for cell in null_sensitivity.cells() {
        if catalog.get(&cell.channel).is_none() {
            return Err(PlatformError::UnknownChannel(cell.channel.clone()));
        }
    }
    let thresholds = null_sensitivity.no_effect_thresholds();

    let below = |ch: &InterferenceChannel| -> Option<(f64, f64)> {
        let rate = fingerprint.rates.get(&ch.id)?;
        let threshold = *thresholds.get(&ch.id)?;
        (rate.peak < threshold).then_some((rate.peak, threshold))
    };

    let mut out = catalog.clone();
    out.channels.clear();
    let mut memory_side = Vec::new();
    for ch in &catalog.channels {
        if ch.resource.is_memory_side() {
            memory_side.push(ch);
            continue;
        }
        match below(ch) {
            Some((peak, threshold)) => {
                out.rationale.insert(
                    ch.id.clone(),
                    format!(
                        "pruned for `{}`: peak use {peak:.3}/ms is below {threshold:.3}/ms, the highest generator rate that produced no measurable interference",
                        fingerprint.workload
                    ),
                );
                out.excluded.push(ch.clone());
            }
            None => out.channels.push(ch.clone()),
        }
    }
    let shared_cache_remains = out.channels.iter().any(|c| c.resource == ResourceKind::SharedCache);
    for ch in memory_side {
        match below(ch) {
            Some(_) if shared_cache_remains => {
                out.rationale.insert(
                    ch.id.clone(),
                    format!(
                        "retained for `{}` despite low isolated use: a shared cache channel remains, so co-runners can push its working set to memory",
                        fingerprint.workload
                    ),
                );
                out.channels.push(ch.clone());
            }
            Some((peak, threshold)) => {
                out.rationale.insert(
                    ch.id.clone(),
                    format!(
                        "pruned for `{}`: peak use {peak:.3}/ms is below {threshold:.3}/ms and no shared cache channel remains",
                        fingerprint.workload
                    ),
                );
                out.excluded.push(ch.clone());
            }
            None => out.channels.push(ch.clone()),
        }
    }
    // Keep declaration order stable.
    let order: BTreeMap<&str, usize> = catalog
        .channels
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id.as_str(), i))
        .collect();
    out.channels.sort_by_key(|c| order[c.id.as_str()]);
    out.excluded
        .sort_by_key(|c| order.get(c.id.as_str()).copied().unwrap_or(usize::MAX));
    Ok(out)
}
