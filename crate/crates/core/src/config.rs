//! Campaign configuration: one JSON document naming the topology, catalog,
//! scenarios, policy and requirements.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{DetectionPolicy, Requirement};
use crate::harness::{Scenario, Workload};
use crate::platform::{derive_default_catalog, load_topology, ChannelCatalog, Topology};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error at `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("invalid config: {0}")]
    Validation(String),
}

/// Inline topology document or a path relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySource {
    Path(PathBuf),
    Inline(Topology),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Policy {
    pub delta: f64,
    pub alpha: f64,
    /// Relative tolerance for retired loads/stores.
    pub counter_tolerance_program: f64,
    /// Relative tolerance for misses and other microarchitectural events.
    pub counter_tolerance_micro: f64,
    /// Target duration of one measured kernel iteration.
    pub calibration_window_ns: u64,
    pub setup_timeout_ms: u64,
    pub fingerprint_samples: u64,
}

impl Default for Policy {
    fn default() -> Self {
        let d = DetectionPolicy::default();
        Policy {
            delta: d.delta,
            alpha: d.alpha,
            counter_tolerance_program: 0.0,
            counter_tolerance_micro: 0.05,
            calibration_window_ns: 100_000,
            setup_timeout_ms: 10_000,
            fingerprint_samples: 200,
        }
    }
}

impl Policy {
    pub fn detection(&self) -> DetectionPolicy {
        DetectionPolicy {
            delta: self.delta,
            alpha: self.alpha,
        }
    }

    pub fn counter_tolerance(&self, event: crate::counters::CounterEvent) -> f64 {
        if event.is_program_controlled() {
            self.counter_tolerance_program
        } else {
            self.counter_tolerance_micro
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub topology: TopologySource,
    /// Explicit catalog; derived from the topology when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<ChannelCatalog>,
    /// Software under test, available to `fingerprint`.
    #[serde(default)]
    pub applications: Vec<Workload>,
    pub scenarios: Vec<Scenario>,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub requirements: Vec<Requirement>,
    /// Channels the platform configuration claims to partition.
    #[serde(default)]
    pub partitioned_channels: Vec<String>,
    /// Relative to the config file's directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("mcint-out")
}

/// A loaded, validated configuration with its topology and catalog resolved.
#[derive(Debug, Clone)]
pub struct Campaign {
    pub config: CampaignConfig,
    pub topology: Topology,
    pub catalog: ChannelCatalog,
    pub base_dir: PathBuf,
    /// SHA-256 of the canonical resolved configuration.
    pub hash: String,
    pub topology_hash: String,
}

/// SHA-256 hex of the canonical (sorted-key, compact) JSON encoding.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    let bytes = canonical_json(value);
    hex::encode(Sha256::digest(&bytes))
}

/// Compact JSON with object keys sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("config types serialize");
    serde_json::to_vec(&v).expect("values serialize")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Campaign {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str(&text, &base)
    }

    pub fn from_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: CampaignConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        Self::resolve(config, base_dir)
    }

    pub fn resolve(mut config: CampaignConfig, base_dir: &Path) -> Result<Self, ConfigError> {
        let topology = match &config.topology {
            TopologySource::Inline(t) => {
                t.validate()
                    .map_err(|e| ConfigError::Validation(format!("topology: {e}")))?;
                t.clone()
            }
            TopologySource::Path(p) => {
                let path = base_dir.join(p);
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path, source })?;
                load_topology(&text).map_err(|e| ConfigError::Validation(format!("topology: {e}")))?
            }
        };
        // The hash covers the topology content, not the file name.
        config.topology = TopologySource::Inline(topology.clone());
        let catalog = match &config.catalog {
            Some(c) => c.clone(),
            None => derive_default_catalog(&topology),
        };
        let campaign = Campaign {
            hash: canonical_hash(&config),
            topology_hash: canonical_hash(&topology),
            config,
            topology,
            catalog,
            base_dir: base_dir.to_path_buf(),
        };
        campaign.validate()?;
        Ok(campaign)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Validation(m));
        let c = &self.config;
        self.catalog
            .validate()
            .map_err(|e| ConfigError::Validation(format!("catalog: {e}")))?;
        for ch in &self.catalog.channels {
            if let Some(core) = ch.scope.iter().find(|c| !self.topology.core_ids.contains(c)) {
                return bad(format!(
                    "catalog channel `{}` names core {core}, which is not in the topology",
                    ch.id
                ));
            }
        }
        let mut ids = BTreeSet::new();
        for s in &c.scenarios {
            if !ids.insert(s.id.as_str()) {
                return bad(format!("duplicate scenario id `{}`", s.id));
            }
            s.validate(&self.topology)
                .map_err(|e| ConfigError::Validation(e.to_string()))?;
            if self.catalog.get(&s.channel).is_none() {
                return bad(format!("scenario `{}` tests unknown channel `{}`", s.id, s.channel));
            }
        }
        for s in &c.scenarios {
            if let Some(b) = &s.baseline {
                match c.scenarios.iter().find(|x| &x.id == b) {
                    None => return bad(format!("scenario `{}` names unknown baseline `{b}`", s.id)),
                    Some(x) if !x.is_isolation() => {
                        return bad(format!("baseline `{b}` of scenario `{}` has adversaries", s.id))
                    }
                    Some(x) if x.victim.workload != s.victim.workload => {
                        return bad(format!(
                            "baseline `{b}` runs a different victim workload than scenario `{}`",
                            s.id
                        ))
                    }
                    _ => {}
                }
            }
        }
        let mut labels = BTreeSet::new();
        for w in &c.applications {
            if !labels.insert(w.label.as_str()) {
                return bad(format!("duplicate application label `{}`", w.label));
            }
            w.validate(self.topology.line_size)
                .map_err(|e| ConfigError::Validation(e.to_string()))?;
        }
        let mut req_ids = BTreeSet::new();
        for r in &c.requirements {
            if !req_ids.insert(r.id.as_str()) {
                return bad(format!("duplicate requirement id `{}`", r.id));
            }
            if !(r.max_margin >= 0.0 && r.max_margin.is_finite()) {
                return bad(format!(
                    "requirement `{}`: max_margin must be a non-negative fraction",
                    r.id
                ));
            }
            if !c.scenarios.iter().any(|s| s.victim.workload.label == r.workload) {
                return bad(format!(
                    "requirement `{}` names workload `{}`, which no scenario measures",
                    r.id, r.workload
                ));
            }
        }
        for p in &c.partitioned_channels {
            if self.catalog.get(p).is_none() {
                return bad(format!("partitioned channel `{p}` is not in the catalog"));
            }
        }
        let pol = &c.policy;
        if !(pol.delta >= 0.0 && pol.alpha > 0.0 && pol.alpha < 1.0) {
            return bad("policy: delta must be >= 0 and alpha in (0, 1)".into());
        }
        if pol.counter_tolerance_program < 0.0 || pol.counter_tolerance_micro < 0.0 {
            return bad("policy: counter tolerances must be non-negative".into());
        }
        Ok(())
    }

    pub fn output_root(&self) -> PathBuf {
        self.base_dir.join(&self.config.output_dir)
    }

    /// Output directory for this exact configuration.
    pub fn versioned_dir(&self) -> PathBuf {
        self.output_root().join(self.short_hash())
    }

    pub fn short_hash(&self) -> &str {
        &self.hash[..12]
    }

    /// Workload by label: applications first, then scenario victims and adversaries.
    pub fn workload(&self, label: &str) -> Option<&Workload> {
        let c = &self.config;
        c.applications.iter().find(|w| w.label == label).or_else(|| {
            c.scenarios
                .iter()
                .flat_map(|s| std::iter::once(&s.victim).chain(&s.adversaries))
                .map(|p| &p.workload)
                .find(|w| w.label == label)
        })
    }
}
