//! The command workflow: plan, run, fingerprint, verify-counters, analyze,
//! report. Each command is independently runnable and maps its result onto
//! an exit status.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{analyze, AnalysisDocument, AnalysisInputs, LoadedTrace, Requirement};
use crate::config::{sha256_hex, Campaign, CampaignConfig, ConfigError, TopologySource};
use crate::counters::{verify_counter, BackendSelector, CounterBackend, CounterError, CounterEvent, CounterVerdict};
use crate::harness::{
    affinity, fingerprint, measure_clock_skew, run_campaign, sanitize, usage_events, CoreMap, HarnessContext,
    HarnessError, Phase, Placement, ResourceUsageProfile, RunTrace, Scenario, ScenarioFailure, Workload,
};
use crate::kernels::{calibrate, size_working_set, AccessPattern, KernelSpec, SizingIntent};
use crate::platform::{
    derive_default_catalog, load_topology, ChannelCatalog, InterferenceChannel, ResourceKind, Topology,
};
use crate::report::{render, Format, Report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUN: i32 = 2;
pub const EXIT_REQUIREMENT_FAIL: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Error,
    Warning,
    Info,
}

/// One machine-readable message; the CLI prints these as JSON lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub level: Level,
    pub code: String,
    pub message: String,
}

impl Diagnostic {
    fn new(level: Level, code: &str, message: impl Into<String>) -> Self {
        Diagnostic {
            level,
            code: code.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Capability(String),
    #[error("{0}")]
    Run(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => EXIT_VALIDATION,
            PipelineError::Capability(_) | PipelineError::Run(_) => EXIT_RUN,
        }
    }

    pub fn diagnostic(&self) -> Diagnostic {
        let code = match self {
            PipelineError::Validation(_) => "validation",
            PipelineError::Capability(_) => "capability",
            PipelineError::Run(_) => "run",
        };
        Diagnostic::new(Level::Error, code, self.to_string())
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

impl From<HarnessError> for PipelineError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Validation(m) => PipelineError::Validation(m),
            HarnessError::Capability(m) => PipelineError::Capability(m),
            other => PipelineError::Run(other.to_string()),
        }
    }
}

impl From<CounterError> for PipelineError {
    fn from(e: CounterError) -> Self {
        match e {
            CounterError::Capability(m) => PipelineError::Capability(m),
            CounterError::Config(m) => PipelineError::Validation(m),
            other => PipelineError::Run(other.to_string()),
        }
    }
}

/// What a successful (or requirement-failing) command produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub exit_code: i32,
    pub written: Vec<PathBuf>,
    pub diagnostics: Vec<Diagnostic>,
}

fn read(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| PipelineError::Validation(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, contents: &[u8], written: &mut Vec<PathBuf>) -> Result<(), PipelineError> {
    let fail = |e: std::io::Error| PipelineError::Run(format!("cannot write {}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(fail)?;
    }
    // Write-then-rename so a crash never leaves a truncated artifact.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, contents).map_err(fail)?;
    fs::rename(&tmp, path).map_err(fail)?;
    written.push(path.to_path_buf());
    Ok(())
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("serializable");
    let mut s = serde_json::to_string_pretty(&v).expect("values serialize");
    s.push('\n');
    s.into_bytes()
}

/// Workloads and requirements to add as software-characterization scenarios.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplicationsDoc {
    #[serde(default)]
    pub applications: Vec<Workload>,
    #[serde(default)]
    pub requirements: Vec<Requirement>,
}

#[derive(Debug, Clone)]
pub struct PlanOptions {
    pub samples: u64,
    pub warmup: u64,
    pub repetitions: u32,
    pub seed: u64,
    /// Upper bound on accesses per measured kernel iteration.
    pub max_inner_ops: u64,
    /// Calibrate every kernel to this window on the planning host.
    pub calibrate: Option<Duration>,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            samples: 1000,
            warmup: 10,
            repetitions: 1,
            seed: 0,
            max_inner_ops: 4096,
            calibrate: None,
        }
    }
}

fn kernel_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The generator kernel that stresses `ch`.
pub fn daemon_kernel(
    ch: &InterferenceChannel,
    t: &Topology,
    seed: u64,
    max_inner_ops: u64,
) -> Result<KernelSpec, PipelineError> {
    let (pattern, intent) = match ch.resource {
        ResourceKind::SharedCache => (AccessPattern::SeqRead, SizingIntent::Resident),
        ResourceKind::CacheBank => (AccessPattern::StridedRead, SizingIntent::Resident),
        ResourceKind::PrivateCacheCoherency => (AccessPattern::SharedLinePingpong, SizingIntent::Resident),
        ResourceKind::DramBandwidth => (AccessPattern::SeqRead, SizingIntent::Thrash),
        ResourceKind::DramBank => (AccessPattern::PointerChase, SizingIntent::Thrash),
        ResourceKind::Interconnect => (AccessPattern::SeqWrite, SizingIntent::Thrash),
    };
    let working_set = size_working_set(ch, intent, t).map_err(|e| PipelineError::Validation(e.to_string()))?;
    let stride = match ch.resource {
        ResourceKind::CacheBank => t.line_size * t.banks.map_or(1, |b| b.count.max(1) as u64),
        _ => t.line_size,
    };
    let lines = working_set / t.line_size;
    Ok(KernelSpec {
        target: ch.id.clone(),
        pattern,
        working_set,
        stride,
        inner_ops: lines.clamp(1, max_inner_ops.max(1)),
        seed,
    })
}

fn pattern_tag(p: AccessPattern) -> &'static str {
    match p {
        AccessPattern::SeqRead => "seqread",
        AccessPattern::SeqWrite => "seqwrite",
        AccessPattern::StridedRead => "strideread",
        AccessPattern::StridedWrite => "stridewrite",
        AccessPattern::PointerChase => "chase",
        AccessPattern::SharedLinePingpong => "pingpong",
    }
}

/// Default campaign: per channel, the channel's daemon alone and against
/// 1..(scope-1) copies of itself; per application and channel reaching its
/// core, the application alone and against the full set of daemons.
pub fn plan(
    t: &Topology,
    catalog: &ChannelCatalog,
    apps: &ApplicationsDoc,
    opts: &PlanOptions,
) -> Result<(CampaignConfig, Vec<Diagnostic>), PipelineError> {
    let mut diagnostics = Vec::new();
    if t.core_ids.len() < 2 {
        diagnostics.push(Diagnostic::new(
            Level::Warning,
            "single-core",
            "topology has one core: no resource is shared, so the plan is empty",
        ));
    }
    let mut scenarios = Vec::new();
    let mut daemons = Vec::new();
    for (i, ch) in catalog.channels.iter().enumerate() {
        let mut spec = daemon_kernel(ch, t, kernel_seed(opts.seed, i as u64), opts.max_inner_ops)?;
        if let Some(window) = opts.calibrate {
            match calibrate(&spec, t, window) {
                Ok(s) => spec = s,
                Err(e) => diagnostics.push(Diagnostic::new(
                    Level::Warning,
                    "calibration",
                    format!("{}: {e}; keeping {} ops per iteration", ch.id, spec.inner_ops),
                )),
            }
        }
        let daemon = Workload::kernel(format!("{}-{}", ch.id, pattern_tag(spec.pattern)), spec);
        let cores: Vec<u32> = ch.scope.iter().copied().collect();
        let counters = usage_events(ch, t);
        let iso_id = format!("{}.iso", ch.id);
        let scenario = |id: String, adversaries: Vec<Placement>, baseline: Option<String>| Scenario {
            id,
            phase: Phase::Platform,
            channel: ch.id.clone(),
            victim: Placement {
                core: cores[0],
                workload: daemon.clone(),
            },
            adversaries,
            samples: opts.samples,
            warmup: opts.warmup,
            counters: counters.clone(),
            repetitions: opts.repetitions,
            baseline,
        };
        scenarios.push(scenario(iso_id.clone(), Vec::new(), None));
        for k in 1..cores.len() {
            let adversaries = cores[1..=k]
                .iter()
                .map(|&core| Placement {
                    core,
                    workload: daemon.clone(),
                })
                .collect();
            scenarios.push(scenario(format!("{}.adv{k}", ch.id), adversaries, Some(iso_id.clone())));
        }
        daemons.push((ch, daemon));
    }

    for app in &apps.applications {
        app.validate(t.line_size)?;
        let core = t.core_ids[0];
        let tag = sanitize(&app.label);
        let iso_id = format!("app-{tag}.iso");
        let mut contended = Vec::new();
        for (ch, daemon) in &daemons {
            if !ch.scope.contains(&core) {
                continue;
            }
            let adversaries: Vec<Placement> = ch
                .scope
                .iter()
                .filter(|&&c| c != core)
                .map(|&c| Placement {
                    core: c,
                    workload: daemon.clone(),
                })
                .collect();
            contended.push(Scenario {
                id: format!("app-{tag}.{}.adv{}", ch.id, adversaries.len()),
                phase: Phase::Software,
                channel: ch.id.clone(),
                victim: Placement {
                    core,
                    workload: app.clone(),
                },
                adversaries,
                samples: opts.samples,
                warmup: opts.warmup,
                counters: usage_events(ch, t),
                repetitions: opts.repetitions,
                baseline: Some(iso_id.clone()),
            });
        }
        if contended.is_empty() {
            continue;
        }
        scenarios.push(Scenario {
            id: iso_id,
            phase: Phase::Software,
            channel: contended[0].channel.clone(),
            victim: Placement {
                core,
                workload: app.clone(),
            },
            adversaries: Vec::new(),
            samples: opts.samples,
            warmup: opts.warmup,
            counters: Vec::new(),
            repetitions: opts.repetitions,
            baseline: None,
        });
        scenarios.extend(contended);
    }

    let config = CampaignConfig {
        topology: TopologySource::Inline(t.clone()),
        catalog: None,
        applications: apps.applications.clone(),
        scenarios,
        policy: Default::default(),
        requirements: apps.requirements.clone(),
        partitioned_channels: Vec::new(),
        output_dir: PathBuf::from("mcint-out"),
        seed: opts.seed,
    };
    // Catch anything the planner got wrong before it reaches a user.
    Campaign::resolve(config.clone(), Path::new("."))
        .map_err(|e| PipelineError::Validation(format!("generated plan is invalid: {e}")))?;
    Ok((config, diagnostics))
}

pub fn cmd_plan(
    topology: &Path,
    applications: Option<&Path>,
    output: &Path,
    opts: &PlanOptions,
) -> Result<Outcome, PipelineError> {
    let t = load_topology(&read(topology)?)
        .map_err(|e| PipelineError::Validation(format!("{}: {e}", topology.display())))?;
    let apps = match applications {
        Some(p) => serde_json::from_str::<ApplicationsDoc>(&read(p)?)
            .map_err(|e| PipelineError::Validation(format!("{}: {e}", p.display())))?,
        None => ApplicationsDoc::default(),
    };
    let catalog = derive_default_catalog(&t);
    let (config, diagnostics) = plan(&t, &catalog, &apps, opts)?;
    let mut out = Outcome {
        diagnostics,
        ..Default::default()
    };
    write(output, &pretty(&config), &mut out.written)?;
    out.diagnostics.push(Diagnostic::new(
        Level::Info,
        "plan",
        format!(
            "{} scenarios over {} channels",
            config.scenarios.len(),
            catalog.channels.len()
        ),
    ));
    Ok(out)
}

fn load(config: &Path) -> Result<Campaign, PipelineError> {
    Ok(Campaign::load(config)?)
}

fn core_map(c: &Campaign) -> Result<CoreMap, PipelineError> {
    let map = CoreMap::from_env(&c.topology)?;
    map.check_capability()?;
    Ok(map)
}

fn backend() -> Result<Arc<dyn CounterBackend>, PipelineError> {
    Ok(BackendSelector::from_env()?.build()?)
}

/// Opens a handle on a stream pinned to `core` to surface capability errors
/// before any run starts. Returns the events the backend cannot observe.
fn probe_backend(b: &Arc<dyn CounterBackend>, map: &CoreMap, core: u32) -> Result<Vec<CounterEvent>, PipelineError> {
    let cpu = map.cpu(core).unwrap_or(0);
    let b = b.clone();
    std::thread::spawn(move || -> Result<Vec<CounterEvent>, PipelineError> {
        affinity::pin_current_thread(cpu)
            .map_err(|e| PipelineError::Capability(format!("pinning to CPU {cpu}: {e}")))?;
        let handle = b.open(core)?;
        Ok(CounterEvent::ALL.into_iter().filter(|&e| !handle.observes(e)).collect())
    })
    .join()
    .map_err(|_| PipelineError::Run("counter probe panicked".into()))?
}

fn unmapped_warning(
    unmapped: &[CounterEvent],
    requested: &BTreeSet<CounterEvent>,
    backend: &str,
) -> Option<Diagnostic> {
    let missing: Vec<&str> = unmapped
        .iter()
        .filter(|e| requested.contains(e))
        .map(|e| e.as_str())
        .collect();
    (!missing.is_empty()).then(|| {
        Diagnostic::new(
            Level::Warning,
            "unmapped-counter",
            format!("backend `{backend}` cannot observe {}", missing.join(", ")),
        )
    })
}

fn context(
    c: &Campaign,
    map: CoreMap,
    backend: Option<Arc<dyn CounterBackend>>,
) -> Result<HarnessContext, PipelineError> {
    let mut ctx = HarnessContext::new(c.topology.clone(), map);
    ctx.clock_skew = measure_clock_skew(&c.topology, &ctx.core_map, 32)?;
    ctx.backend = backend;
    ctx.setup_timeout = Duration::from_millis(c.config.policy.setup_timeout_ms);
    ctx.config_hash = c.hash.clone();
    ctx.topology_hash = c.topology_hash.clone();
    Ok(ctx)
}

/// Index of a campaign's trace files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub traces: Vec<String>,
    pub failures: Vec<ScenarioFailure>,
}

pub fn trace_file_name(scenario: &str, rep: u32) -> String {
    format!("{scenario}.rep{rep}.jsonl")
}

struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir).map_err(|e| PipelineError::Run(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(".mcint.lock");
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                PipelineError::Run(format!(
                    "output directory {} is locked by another run ({}): {e}",
                    dir.display(),
                    path.display()
                ))
            })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(DirLock(path))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Runs every scenario and writes one JSONL trace per repetition, plus
/// `campaign.json`. Exit 2 when any run failed; successful traces are kept.
pub fn cmd_run(config: &Path, out_dir: Option<&Path>) -> Result<Outcome, PipelineError> {
    let c = load(config)?;
    let map = core_map(&c)?;
    let wants_counters = c.config.scenarios.iter().any(|s| !s.counters.is_empty());
    let mut out = Outcome::default();
    let backend = if wants_counters {
        let b = backend()?;
        let unmapped = probe_backend(&b, &map, c.topology.core_ids[0])?;
        let requested = c
            .config
            .scenarios
            .iter()
            .flat_map(|s| s.counters.iter().copied())
            .collect();
        out.diagnostics
            .extend(unmapped_warning(&unmapped, &requested, &b.name()));
        Some(b)
    } else {
        None
    };
    let dir = out_dir.map_or_else(|| c.versioned_dir().join("traces"), Path::to_path_buf);
    let _lock = DirLock::acquire(&dir)?;
    let ctx = context(&c, map, backend)?;
    let mut files = Vec::new();
    let set = run_campaign(&ctx, &c.config.scenarios, |trace: &RunTrace| {
        let name = trace_file_name(&trace.header.scenario, trace.header.rep);
        write(&dir.join(&name), &trace.to_jsonl(), &mut out.written).map_err(|e| HarnessError::Trace(e.to_string()))?;
        files.push(name);
        Ok(())
    });
    for f in &set.failures {
        out.diagnostics.push(Diagnostic::new(
            Level::Error,
            "run",
            format!(
                "{} rep {}: {}",
                f.scenario,
                f.rep.map_or("-".into(), |r| r.to_string()),
                f.error
            ),
        ));
    }
    for t in set.traces.iter().filter(|t| !t.header.valid) {
        out.diagnostics.push(Diagnostic::new(
            Level::Warning,
            "invalid-trace",
            format!(
                "{} rep {}: {}",
                t.header.scenario,
                t.header.rep,
                t.header.flags.join("; ")
            ),
        ));
    }
    let manifest = RunManifest {
        tool_version: crate::TOOL_VERSION.to_string(),
        config_hash: c.hash.clone(),
        traces: files,
        failures: set.failures.clone(),
    };
    write(&dir.join("campaign.json"), &pretty(&manifest), &mut out.written)?;
    out.exit_code = if set.is_complete() { EXIT_OK } else { EXIT_RUN };
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintFile {
    pub tool_version: String,
    pub config_hash: String,
    pub backend: String,
    pub core: u32,
    pub profile: ResourceUsageProfile,
}

pub fn cmd_fingerprint(config: &Path, label: &str) -> Result<Outcome, PipelineError> {
    let c = load(config)?;
    let w = c
        .workload(label)
        .ok_or_else(|| PipelineError::Validation(format!("no workload labelled `{label}` in the config")))?
        .clone();
    let core = c
        .config
        .scenarios
        .iter()
        .find(|s| s.victim.workload.label == label)
        .map_or(c.topology.core_ids[0], |s| s.victim.core);
    let map = core_map(&c)?;
    let b = backend()?;
    let unmapped = probe_backend(&b, &map, core)?;
    let requested = c
        .catalog
        .channels
        .iter()
        .flat_map(|ch| usage_events(ch, &c.topology))
        .collect();
    let mut out = Outcome::default();
    out.diagnostics
        .extend(unmapped_warning(&unmapped, &requested, &b.name()));
    let name = b.name();
    let ctx = context(&c, map, Some(b))?;
    let profile = fingerprint(&ctx, &w, core, &c.catalog, c.config.policy.fingerprint_samples, 2)?;
    if !profile.unobserved.is_empty() {
        out.diagnostics.push(Diagnostic::new(
            Level::Warning,
            "unobserved",
            format!("no counter observes: {}", profile.unobserved.join(", ")),
        ));
    }
    let file = FingerprintFile {
        tool_version: crate::TOOL_VERSION.to_string(),
        config_hash: c.hash.clone(),
        backend: name,
        core,
        profile,
    };
    let path = c
        .versioned_dir()
        .join("fingerprints")
        .join(format!("{}.json", sanitize(label)));
    write(&path, &pretty(&file), &mut out.written)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterFile {
    pub tool_version: String,
    pub config_hash: String,
    pub backend: String,
    pub verdicts: Vec<CounterVerdict>,
}

/// Verifies every abstract event on the topology's first core and writes
/// `counters.json`. Failing counters are reported, not fatal.
pub fn cmd_verify_counters(config: &Path) -> Result<Outcome, PipelineError> {
    let c = load(config)?;
    let map = core_map(&c)?;
    let b = backend()?;
    let cpu = map.cpu(c.topology.core_ids[0]).unwrap_or(0);
    let (t, policy) = (c.topology.clone(), c.config.policy);
    let bb = b.clone();
    let verdicts = std::thread::spawn(move || -> Result<Vec<CounterVerdict>, PipelineError> {
        affinity::pin_current_thread(cpu)
            .map_err(|e| PipelineError::Capability(format!("pinning to CPU {cpu}: {e}")))?;
        CounterEvent::ALL
            .iter()
            .map(|&e| verify_counter(bb.as_ref(), e, &t, policy.counter_tolerance(e)).map_err(PipelineError::from))
            .collect()
    })
    .join()
    .map_err(|_| PipelineError::Run("counter verification panicked".into()))??;
    let mut out = Outcome::default();
    for v in &verdicts {
        if v.status != crate::counters::VerdictStatus::Pass {
            out.diagnostics.push(Diagnostic::new(
                Level::Warning,
                "counter",
                format!("{}: {:?} ({})", v.event, v.status, v.note),
            ));
        }
    }
    let file = CounterFile {
        tool_version: crate::TOOL_VERSION.to_string(),
        config_hash: c.hash.clone(),
        backend: b.name(),
        verdicts,
    };
    write(
        &c.versioned_dir().join("counters.json"),
        &pretty(&file),
        &mut out.written,
    )?;
    Ok(out)
}

fn check_hash(what: &Path, found: &str, c: &Campaign) -> Result<(), PipelineError> {
    if found != c.hash {
        return Err(PipelineError::Validation(format!(
            "{} belongs to config {found}, not {}; artifacts from different configs cannot be mixed",
            what.display(),
            c.hash
        )));
    }
    Ok(())
}

fn sorted_entries(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| PipelineError::Validation(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads traces, counter verdicts and fingerprints and writes
/// `analysis.json` with histogram exports into `out_dir` (default: the
/// config's versioned directory). Exit 3 when a requirement fails.
pub fn cmd_analyze(config: &Path, traces_dir: &Path, out_dir: Option<&Path>) -> Result<Outcome, PipelineError> {
    let c = load(config)?;
    let mut traces = Vec::new();
    for path in sorted_entries(traces_dir, "jsonl")? {
        let bytes =
            fs::read(&path).map_err(|e| PipelineError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let trace = RunTrace::read_jsonl(bytes.as_slice())
            .map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        check_hash(&path, &trace.header.config_hash, &c)?;
        traces.push(LoadedTrace {
            file: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: sha256_hex(&bytes),
            trace,
        });
    }
    let vdir = c.versioned_dir();
    let counters_path = vdir.join("counters.json");
    let verdicts = if counters_path.exists() {
        let f: CounterFile = serde_json::from_str(&read(&counters_path)?)
            .map_err(|e| PipelineError::Validation(format!("{}: {e}", counters_path.display())))?;
        check_hash(&counters_path, &f.config_hash, &c)?;
        f.verdicts
    } else {
        Vec::new()
    };
    let mut fingerprints = Vec::new();
    let fp_dir = vdir.join("fingerprints");
    if fp_dir.is_dir() {
        for path in sorted_entries(&fp_dir, "json")? {
            let f: FingerprintFile = serde_json::from_str(&read(&path)?)
                .map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
            check_hash(&path, &f.config_hash, &c)?;
            fingerprints.push(f.profile);
        }
    }
    let inputs = AnalysisInputs {
        config_hash: &c.hash,
        topology: &c.topology,
        catalog: &c.catalog,
        scenarios: &c.config.scenarios,
        policy: c.config.policy.detection(),
        requirements: &c.config.requirements,
        partitioned_channels: &c.config.partitioned_channels,
        traces: &traces,
        fingerprints: &fingerprints,
        counter_verdicts: &verdicts,
    };
    let (doc, exports) = analyze(&inputs).map_err(|e| PipelineError::Validation(e.to_string()))?;
    let dir = out_dir.map_or(vdir, Path::to_path_buf);
    let mut out = Outcome::default();
    for f in &exports {
        write(&dir.join(&f.path), f.contents.as_bytes(), &mut out.written)?;
    }
    write(
        &dir.join("analysis.json"),
        doc.to_canonical_json().as_bytes(),
        &mut out.written,
    )?;
    for n in &doc.notes {
        out.diagnostics
            .push(Diagnostic::new(Level::Warning, "analysis", n.clone()));
    }
    out.exit_code = requirement_exit(&doc, &mut out.diagnostics);
    Ok(out)
}

fn requirement_exit(doc: &AnalysisDocument, diagnostics: &mut Vec<Diagnostic>) -> i32 {
    let mut code = EXIT_OK;
    for r in doc.failed_requirements() {
        diagnostics.push(Diagnostic::new(
            Level::Error,
            "requirement",
            format!("{} ({}): FAIL — {}", r.id, r.workload, r.note),
        ));
        code = EXIT_REQUIREMENT_FAIL;
    }
    code
}

/// Writes `report.json` and `report.md` next to the analysis document.
/// Exit 3 when a requirement fails; the report is written regardless.
pub fn cmd_report(config: &Path, analysis: &Path) -> Result<Outcome, PipelineError> {
    let c = load(config)?;
    let bytes = fs::read(analysis)
        .map_err(|e| PipelineError::Validation(format!("cannot read {}: {e}", analysis.display())))?;
    let doc: AnalysisDocument = serde_json::from_slice(&bytes)
        .map_err(|e| PipelineError::Validation(format!("{}: {e}", analysis.display())))?;
    check_hash(analysis, &doc.config_hash, &c)?;
    let report = Report::assemble(&c.topology, &c.catalog, &doc, &sha256_hex(&bytes));
    let json = render(&report, Format::Structured).map_err(|e| PipelineError::Validation(e.to_string()))?;
    let md = render(&report, Format::HumanReadable).map_err(|e| PipelineError::Validation(e.to_string()))?;
    let dir = analysis.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Outcome::default();
    write(&dir.join("report.json"), json.as_bytes(), &mut out.written)?;
    write(&dir.join("report.md"), md.as_bytes(), &mut out.written)?;
    for (name, e) in &report.objectives {
        if e.status == crate::report::ObjectiveStatus::Unsupported {
            out.diagnostics.push(Diagnostic::new(
                Level::Warning,
                "objective",
                format!("{name} unsupported: {}", e.explanation),
            ));
        }
    }
    out.exit_code = requirement_exit(&doc, &mut out.diagnostics);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUAD: &str = r#"{
        "cores": [0, 1, 2, 3], "line_size": 64,
        "caches": [
            {"level": 1, "capacity": 32768, "associativity": 8, "shared_by": [0]},
            {"level": 1, "capacity": 32768, "associativity": 8, "shared_by": [1]},
            {"level": 1, "capacity": 32768, "associativity": 8, "shared_by": [2]},
            {"level": 1, "capacity": 32768, "associativity": 8, "shared_by": [3]},
            {"level": 2, "capacity": 2097152, "associativity": 16, "shared_by": [0, 1, 2, 3]}
        ],
        "dram_nodes": 1
    }"#;

    #[test]
    fn quad_plan_has_one_isolation_and_three_contended_per_channel() {
        let t = load_topology(QUAD).unwrap();
        let cat = derive_default_catalog(&t);
        assert_eq!(cat.channels.len(), 4);
        let (cfg, diags) = plan(&t, &cat, &ApplicationsDoc::default(), &PlanOptions::default()).unwrap();
        assert!(diags.is_empty());
        assert_eq!(cfg.scenarios.len(), 16);
        for ch in &cat.channels {
            let mine: Vec<&Scenario> = cfg.scenarios.iter().filter(|s| s.channel == ch.id).collect();
            let mut counts: Vec<usize> = mine.iter().map(|s| s.adversaries.len()).collect();
            counts.sort();
            assert_eq!(counts, vec![0, 1, 2, 3], "{}", ch.id);
        }
    }

    #[test]
    fn single_core_plan_is_empty_with_warning() {
        let t = load_topology(r#"{"cores": [0], "line_size": 64, "caches": [], "dram_nodes": 1}"#).unwrap();
        let (cfg, diags) = plan(
            &t,
            &derive_default_catalog(&t),
            &ApplicationsDoc::default(),
            &PlanOptions::default(),
        )
        .unwrap();
        assert!(cfg.scenarios.is_empty());
        assert_eq!(diags[0].level, Level::Warning);
    }

    #[test]
    fn empty_catalog_gives_empty_plan() {
        let t = load_topology(QUAD).unwrap();
        let (cfg, _) = plan(
            &t,
            &ChannelCatalog::default(),
            &ApplicationsDoc::default(),
            &PlanOptions::default(),
        )
        .unwrap();
        assert!(cfg.scenarios.is_empty());
    }

    #[test]
    fn applications_get_software_scenarios() {
        let t = load_topology(QUAD).unwrap();
        let cat = derive_default_catalog(&t);
        let app = Workload::kernel(
            "app",
            KernelSpec {
                target: "app".into(),
                pattern: AccessPattern::SeqRead,
                working_set: 4096,
                stride: 64,
                inner_ops: 64,
                seed: 1,
            },
        );
        let doc = ApplicationsDoc {
            applications: vec![app],
            requirements: vec![Requirement {
                id: "R1".into(),
                workload: "app".into(),
                max_margin: 0.5,
            }],
        };
        let (cfg, _) = plan(&t, &cat, &doc, &PlanOptions::default()).unwrap();
        let sw: Vec<&Scenario> = cfg.scenarios.iter().filter(|s| s.phase == Phase::Software).collect();
        assert_eq!(sw.len(), 1 + cat.channels.len());
        assert!(sw
            .iter()
            .filter(|s| !s.is_isolation())
            .all(|s| s.adversaries.len() == 3));
    }

    #[test]
    fn plan_is_seed_deterministic() {
        let t = load_topology(QUAD).unwrap();
        let cat = derive_default_catalog(&t);
        let opts = PlanOptions {
            seed: 9,
            ..Default::default()
        };
        let a = plan(&t, &cat, &ApplicationsDoc::default(), &opts).unwrap().0;
        let b = plan(&t, &cat, &ApplicationsDoc::default(), &opts).unwrap().0;
        assert_eq!(a, b);
        let c = plan(&t, &cat, &ApplicationsDoc::default(), &PlanOptions::default())
            .unwrap()
            .0;
        assert_ne!(a, c);
    }
}
