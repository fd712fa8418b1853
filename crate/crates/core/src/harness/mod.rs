//! Measurement harness: victim in isolation, victim against adversaries,
//! fingerprinting, and whole campaigns.
//!
//! One execution stream per placement, each pinned to its core. Streams
//! share only the start/stop flags; traces are assembled after join.

pub mod affinity;
pub mod trace;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counters::{read_window, Activity, CounterBackend, CounterError, CounterEvent, CounterHandle};
use crate::kernels::{kernel_activity, AccessPattern, Arena, KernelError, KernelRunner, KernelSpec};
use crate::platform::{ChannelCatalog, CoreId, InterferenceChannel, ResourceKind, Topology};

pub use affinity::CoreMap;
pub use trace::{ClockSkew, Role, RunTrace, TraceHeader, TraceRecord};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error("capability unavailable: {0}")]
    Capability(String),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("adversaries did not reach steady state within {0:?}")]
    SetupTimeout(Duration),
    #[error("workload failed: {0}")]
    Workload(String),
    #[error("trace format error: {0}")]
    Trace(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<CounterError> for HarnessError {
    fn from(e: CounterError) -> Self {
        match e {
            CounterError::Capability(m) => HarnessError::Capability(m),
            other => HarnessError::Setup(other.to_string()),
        }
    }
}

impl From<KernelError> for HarnessError {
    fn from(e: KernelError) -> Self {
        HarnessError::Setup(e.to_string())
    }
}

/// A failed run. Records gathered before the failure are kept.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct RunError {
    pub error: HarnessError,
    pub partial: Option<Box<RunTrace>>,
}

impl From<HarnessError> for RunError {
    fn from(error: HarnessError) -> Self {
        RunError { error, partial: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalTiming {
    /// One invocation, timed end to end.
    #[default]
    PerInvocation,
    /// The workload writes `begin <ns>` / `end <ns>` lines (CLOCK_MONOTONIC)
    /// to the file named by `MCINT_MARKER_FILE`; the first pair is measured.
    Markers,
}

pub const MARKER_ENV: &str = "MCINT_MARKER_FILE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadKind {
    Kernel(KernelSpec),
    External {
        command: Vec<String>,
        #[serde(default)]
        timing: ExternalTiming,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub label: String,
    #[serde(flatten)]
    pub kind: WorkloadKind,
}

impl Workload {
    pub fn kernel(label: impl Into<String>, spec: KernelSpec) -> Self {
        Workload {
            label: label.into(),
            kind: WorkloadKind::Kernel(spec),
        }
    }

    pub fn validate(&self, line_size: u64) -> Result<(), HarnessError> {
        match &self.kind {
            WorkloadKind::Kernel(spec) => spec
                .validate(line_size)
                .map_err(|e| HarnessError::Validation(format!("workload `{}`: {e}", self.label))),
            WorkloadKind::External { command, .. } => {
                if command.is_empty() || command[0].is_empty() {
                    Err(HarnessError::Validation(format!(
                        "workload `{}`: external command is empty",
                        self.label
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub core: CoreId,
    pub workload: Workload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Generator against generators.
    #[default]
    Platform,
    /// Application against generators.
    Software,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    #[serde(default)]
    pub phase: Phase,
    /// Channel under test.
    pub channel: String,
    pub victim: Placement,
    #[serde(default)]
    pub adversaries: Vec<Placement>,
    pub samples: u64,
    #[serde(default)]
    pub warmup: u64,
    #[serde(default)]
    pub counters: Vec<CounterEvent>,
    #[serde(default = "one")]
    pub repetitions: u32,
    /// Isolation scenario this one is compared against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
}

fn one() -> u32 {
    1
}

impl Scenario {
    pub fn is_isolation(&self) -> bool {
        self.adversaries.is_empty()
    }

    pub fn validate(&self, t: &Topology) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Validation(format!("scenario `{}`: {m}", self.id)));
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return bad("id must be non-empty and use only [A-Za-z0-9._-]".into());
        }
        if self.samples == 0 {
            return bad("samples must be at least 1".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        let mut cores = BTreeSet::new();
        for p in std::iter::once(&self.victim).chain(&self.adversaries) {
            if !t.core_ids.contains(&p.core) {
                return bad(format!("core {} is not in the topology", p.core));
            }
            if !cores.insert(p.core) {
                return bad(format!("core {} is used by more than one placement", p.core));
            }
            p.workload.validate(t.line_size)?;
        }
        Ok(())
    }
}

/// Nanoseconds on the system-wide monotonic clock shared by all cores and
/// by external workloads.
pub fn monotonic_ns() -> u64 {
    #[cfg(unix)]
    {
        let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
        // SAFETY: valid clock id and out-pointer.
        unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
        ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
    }
    #[cfg(not(unix))]
    {
        use std::sync::OnceLock;
        static EPOCH: OnceLock<Instant> = OnceLock::new();
        EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
    }
}

pub const CLOCK_DOMAIN: &str = "CLOCK_MONOTONIC";

/// Everything a run needs besides the scenario itself.
#[derive(Clone)]
pub struct HarnessContext {
    pub topology: Topology,
    pub core_map: CoreMap,
    pub backend: Option<Arc<dyn CounterBackend>>,
    pub setup_timeout: Duration,
    pub config_hash: String,
    pub topology_hash: String,
    pub clock_skew: ClockSkew,
}

impl HarnessContext {
    pub fn new(topology: Topology, core_map: CoreMap) -> Self {
        HarnessContext {
            topology,
            core_map,
            backend: None,
            setup_timeout: Duration::from_secs(10),
            config_hash: String::new(),
            topology_hash: String::new(),
            clock_skew: ClockSkew::default(),
        }
    }

    fn header(&self, s: &Scenario, rep: u32) -> TraceHeader {
        TraceHeader {
            tool_version: crate::TOOL_VERSION.to_string(),
            config_hash: self.config_hash.clone(),
            topology_hash: self.topology_hash.clone(),
            scenario: s.id.clone(),
            rep,
            clock_domain: CLOCK_DOMAIN.into(),
            clock_skew: self.clock_skew.clone(),
            core_map: self.core_map.as_map().clone(),
            valid: true,
            flags: Vec::new(),
            error: None,
        }
    }

    fn cpu(&self, core: CoreId) -> Result<usize, HarnessError> {
        self.core_map
            .cpu(core)
            .ok_or_else(|| HarnessError::Validation(format!("core {core} has no CPU mapping")))
    }
}

enum Prepared {
    Kernel {
        spec: KernelSpec,
        arena: Arc<Arena>,
        activity: Activity,
    },
    External {
        command: Vec<String>,
        timing: ExternalTiming,
    },
}

fn prepare(
    w: &Workload,
    core: CoreId,
    t: &Topology,
    shared: &mut HashMap<u64, Arc<Arena>>,
) -> Result<Prepared, HarnessError> {
    Ok(match &w.kind {
        WorkloadKind::Kernel(spec) => {
            let arena = if spec.pattern == AccessPattern::SharedLinePingpong {
                match shared.get(&spec.working_set) {
                    Some(a) => a.clone(),
                    None => {
                        let a = Arc::new(Arena::build(spec, t.line_size)?);
                        shared.insert(spec.working_set, a.clone());
                        a
                    }
                }
            } else {
                Arc::new(Arena::build(spec, t.line_size)?)
            };
            Prepared::Kernel {
                spec: spec.clone(),
                activity: kernel_activity(spec, t, core, spec.inner_ops),
                arena,
            }
        }
        WorkloadKind::External { command, timing } => Prepared::External {
            command: command.clone(),
            timing: *timing,
        },
    })
}

enum Exec<'a> {
    Kernel {
        runner: KernelRunner<'a>,
        activity: Activity,
    },
    External {
        command: &'a [String],
        timing: ExternalTiming,
        marker: PathBuf,
    },
}

static MARKER_SEQ: AtomicU64 = AtomicU64::new(0);

impl<'a> Exec<'a> {
    fn new(p: &'a Prepared) -> Result<Self, HarnessError> {
        Ok(match p {
            Prepared::Kernel { spec, arena, activity } => Exec::Kernel {
                runner: KernelRunner::new(spec, arena)?,
                activity: *activity,
            },
            Prepared::External { command, timing } => Exec::External {
                command,
                timing: *timing,
                marker: std::env::temp_dir().join(format!(
                    "mcint-marker-{}-{}",
                    std::process::id(),
                    MARKER_SEQ.fetch_add(1, Ordering::Relaxed)
                )),
            },
        })
    }

    /// One iteration: (start_ns, end_ns, activity). `end_ns > start_ns`.
    fn iteration(&mut self) -> Result<(u64, u64, Activity), String> {
        let (start, end, activity) = match self {
            Exec::Kernel { runner, activity } => {
                let start = monotonic_ns();
                runner.iterate();
                let end = monotonic_ns();
                (start, end, *activity)
            }
            Exec::External {
                command,
                timing,
                marker,
            } => {
                let _ = std::fs::remove_file(&*marker);
                let start = monotonic_ns();
                let status = Command::new(&command[0])
                    .args(&command[1..])
                    .env(MARKER_ENV, &*marker)
                    .status()
                    .map_err(|e| format!("cannot start `{}`: {e}", command[0]))?;
                let end = monotonic_ns();
                if !status.success() {
                    return Err(format!("`{}` exited with {status}", command.join(" ")));
                }
                match timing {
                    ExternalTiming::PerInvocation => (start, end, Activity::default()),
                    ExternalTiming::Markers => {
                        let (b, e) = read_markers(marker)?;
                        (b, e, Activity::default())
                    }
                }
            }
        };
        Ok((start, end.max(start + 1), activity))
    }
}

impl Drop for Exec<'_> {
    fn drop(&mut self) {
        if let Exec::External { marker, .. } = self {
            let _ = std::fs::remove_file(&*marker);
        }
    }
}

fn read_markers(path: &PathBuf) -> Result<(u64, u64), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("no marker file: {e}"))?;
    let mut begin = None;
    for line in text.lines() {
        let mut it = line.split_whitespace();
        match (it.next(), it.next().and_then(|v| v.parse::<u64>().ok())) {
            (Some("begin"), Some(ns)) if begin.is_none() => begin = Some(ns),
            (Some("end"), Some(ns)) => {
                if let Some(b) = begin {
                    return Ok((b, ns));
                }
            }
            _ => {}
        }
    }
    Err("marker file has no begin/end pair".into())
}

/// Runs one iteration bracketed by counter reads when events are requested.
fn measured(
    exec: &mut Exec<'_>,
    handle: Option<&mut Box<dyn CounterHandle>>,
    core: CoreId,
    events: &[CounterEvent],
) -> Result<(u64, u64, BTreeMap<CounterEvent, u64>), String> {
    match handle {
        Some(h) if !events.is_empty() => {
            let mut outcome = Err(String::new());
            let windows = read_window(h.as_mut(), core, events, || match exec.iteration() {
                Ok((s, e, a)) => {
                    outcome = Ok((s, e));
                    a
                }
                Err(msg) => {
                    outcome = Err(msg);
                    Activity::default()
                }
            })
            .map_err(|e| e.to_string())?;
            let (s, e) = outcome?;
            let ctr = windows
                .iter()
                .filter_map(|w| w.delta().map(|d| (w.event(), d)))
                .collect();
            Ok((s, e, ctr))
        }
        _ => {
            let (s, e, _) = exec.iteration()?;
            Ok((s, e, BTreeMap::new()))
        }
    }
}

struct Flags {
    running: Vec<AtomicBool>,
    failed: Vec<AtomicBool>,
    /// End timestamp of the victim's last record; 0 while it is running.
    victim_end: AtomicU64,
    abort: AtomicBool,
}

struct StreamOutcome {
    records: Vec<TraceRecord>,
    flags: Vec<String>,
    error: Option<HarnessError>,
}

struct Stream<'a> {
    ctx: &'a HarnessContext,
    scenario: &'a Scenario,
    rep: u32,
    core: CoreId,
    role: Role,
    prepared: &'a Prepared,
}

impl Stream<'_> {
    fn setup(&self) -> Result<(usize, Option<Box<dyn CounterHandle>>), HarnessError> {
        let cpu = self.ctx.cpu(self.core)?;
        affinity::pin_current_thread(cpu)
            .map_err(|e| HarnessError::Capability(format!("pinning core {} to CPU {cpu}: {e}", self.core)))?;
        let handle = match (&self.ctx.backend, self.scenario.counters.is_empty()) {
            (_, true) => None,
            (Some(b), false) => Some(b.open(self.core)?),
            (None, false) => {
                return Err(HarnessError::Capability(
                    "scenario requests counters but no counter backend is configured".into(),
                ))
            }
        };
        Ok((cpu, handle))
    }

    fn record(&self, iter: u64, (start_ns, end_ns, ctr): (u64, u64, BTreeMap<CounterEvent, u64>)) -> TraceRecord {
        TraceRecord {
            scenario: self.scenario.id.clone(),
            rep: self.rep,
            core: self.core,
            role: self.role,
            iter,
            start_ns,
            end_ns,
            ctr,
        }
    }

    fn check_cpu(&self, cpu: usize, iter: u64, flags: &mut Vec<String>) {
        if let Some(seen) = affinity::current_cpu() {
            if seen != cpu && flags.len() < 16 {
                flags.push(format!(
                    "core {} iteration {iter} ran on CPU {seen}, expected CPU {cpu}",
                    self.core
                ));
            }
        }
    }

    fn victim(&self, flags: &Flags) -> StreamOutcome {
        let mut out = StreamOutcome {
            records: Vec::with_capacity(self.scenario.samples as usize),
            flags: Vec::new(),
            error: None,
        };
        let result = (|| -> Result<(), HarnessError> {
            let (cpu, mut handle) = self.setup()?;
            let mut exec = Exec::new(self.prepared)?;
            let deadline = Instant::now() + self.ctx.setup_timeout;
            while !flags.running.iter().all(|f| f.load(Ordering::Acquire)) {
                if let Some(i) = flags.failed.iter().position(|f| f.load(Ordering::Acquire)) {
                    return Err(HarnessError::Setup(format!(
                        "adversary {} failed before reaching steady state",
                        self.scenario.adversaries[i].core
                    )));
                }
                if Instant::now() > deadline {
                    return Err(HarnessError::SetupTimeout(self.ctx.setup_timeout));
                }
                thread::sleep(Duration::from_micros(200));
            }
            for _ in 0..self.scenario.warmup {
                exec.iteration().map_err(HarnessError::Workload)?;
            }
            for i in 0..self.scenario.samples {
                let m = measured(&mut exec, handle.as_mut(), self.core, &self.scenario.counters)
                    .map_err(HarnessError::Workload)?;
                self.check_cpu(cpu, i, &mut out.flags);
                out.records.push(self.record(i, m));
            }
            Ok(())
        })();
        let end = out.records.last().map_or(1, |r| r.end_ns.max(1));
        flags.victim_end.store(end, Ordering::Release);
        if let Err(e) = result {
            flags.abort.store(true, Ordering::Release);
            out.error = Some(e);
        }
        out
    }

    fn adversary(&self, index: usize, flags: &Flags) -> StreamOutcome {
        let mut out = StreamOutcome {
            records: Vec::new(),
            flags: Vec::new(),
            error: None,
        };
        let fail = |out: &mut StreamOutcome, e: HarnessError| {
            flags.failed[index].store(true, Ordering::Release);
            out.error = Some(e);
        };
        let (cpu, mut handle) = match self.setup() {
            Ok(v) => v,
            Err(e) => {
                fail(&mut out, e);
                return out;
            }
        };
        let mut exec = match Exec::new(self.prepared) {
            Ok(e) => e,
            Err(e) => {
                fail(&mut out, e);
                return out;
            }
        };
        for _ in 0..self.scenario.warmup {
            if let Err(msg) = exec.iteration() {
                fail(&mut out, HarnessError::Workload(msg));
                return out;
            }
        }
        let mut iter = 0u64;
        while !flags.abort.load(Ordering::Acquire) {
            match measured(&mut exec, handle.as_mut(), self.core, &self.scenario.counters) {
                Ok(m) => {
                    self.check_cpu(cpu, iter, &mut out.flags);
                    let record = self.record(iter, m);
                    let end = record.end_ns;
                    out.records.push(record);
                    if iter == 0 {
                        flags.running[index].store(true, Ordering::Release);
                    }
                    iter += 1;
                    // Stop only once this stream covers the victim's whole window.
                    let victim_end = flags.victim_end.load(Ordering::Acquire);
                    if victim_end != 0 && end >= victim_end {
                        break;
                    }
                }
                Err(msg) => {
                    out.flags.push(format!(
                        "adversary on core {} stopped after {iter} iterations: {msg}",
                        self.core
                    ));
                    if iter == 0 {
                        flags.failed[index].store(true, Ordering::Release);
                    }
                    break;
                }
            }
        }
        out
    }
}

fn run_streams(ctx: &HarnessContext, s: &Scenario, rep: u32) -> Result<RunTrace, RunError> {
    let t = &ctx.topology;
    let mut shared = HashMap::new();
    let victim_prep = prepare(&s.victim.workload, s.victim.core, t, &mut shared)?;
    let adv_preps = s
        .adversaries
        .iter()
        .map(|p| prepare(&p.workload, p.core, t, &mut shared))
        .collect::<Result<Vec<_>, _>>()?;
    let flags = Flags {
        running: s.adversaries.iter().map(|_| AtomicBool::new(false)).collect(),
        failed: s.adversaries.iter().map(|_| AtomicBool::new(false)).collect(),
        victim_end: AtomicU64::new(0),
        abort: AtomicBool::new(false),
    };
    let (victim, adversaries) = thread::scope(|scope| {
        let flags = &flags;
        let handles: Vec<_> = s
            .adversaries
            .iter()
            .zip(&adv_preps)
            .enumerate()
            .map(|(i, (p, prep))| {
                let stream = Stream {
                    ctx,
                    scenario: s,
                    rep,
                    core: p.core,
                    role: Role::Adversary,
                    prepared: prep,
                };

                scope.spawn(move || stream.adversary(i, flags))
            })
            .collect();
        let stream = Stream {
            ctx,
            scenario: s,
            rep,
            core: s.victim.core,
            role: Role::Victim,
            prepared: &victim_prep,
        };
        let victim = scope
            .spawn(move || stream.victim(flags))
            .join()
            .expect("victim stream panicked");
        let adversaries: Vec<StreamOutcome> = handles
            .into_iter()
            .map(|h| h.join().expect("adversary stream panicked"))
            .collect();
        (victim, adversaries)
    });

    let mut header = ctx.header(s, rep);
    let mut records = victim.records;
    header.flags.extend(victim.flags);
    for a in &adversaries {
        header.flags.extend(a.flags.iter().cloned());
    }
    let adversary_error = adversaries.iter().find_map(|a| a.error.as_ref().map(|e| e.to_string()));
    for a in adversaries {
        records.extend(a.records);
    }
    let mut trace = RunTrace { header, records };
    if let Some(e) = victim.error {
        trace.header.valid = false;
        let msg = match &adversary_error {
            Some(a) => format!("{e} ({a})"),
            None => e.to_string(),
        };
        trace.header.error = Some(msg.clone());
        let error = match e {
            HarnessError::Setup(_) if adversary_error.is_some() => HarnessError::Setup(msg),
            other => other,
        };
        return Err(RunError {
            error,
            partial: Some(Box::new(trace)),
        });
    }
    check_structure(&mut trace, s);
    Ok(trace)
}

/// Post-hoc checks on a completed run; failures mark the trace invalid.
fn check_structure(trace: &mut RunTrace, s: &Scenario) {
    let mut problems = Vec::new();
    let victim_first = trace.victim_records().map(|r| r.start_ns).min();
    let victim_last = trace.victim_records().map(|r| r.end_ns).max();
    if trace.victim_records().count() as u64 != s.samples {
        problems.push(format!(
            "victim recorded {} of {} samples",
            trace.victim_records().count(),
            s.samples
        ));
    }
    for p in &s.adversaries {
        let mine: Vec<&TraceRecord> = trace.adversary_records().filter(|r| r.core == p.core).collect();
        let first = mine.iter().map(|r| r.start_ns).min();
        let last = mine.iter().map(|r| r.end_ns).max();
        match (first, last, victim_first, victim_last) {
            (Some(af), Some(al), Some(vf), Some(vl)) => {
                if af >= vf {
                    problems.push(format!("adversary on core {} started after the victim", p.core));
                }
                if al < vl {
                    problems.push(format!(
                        "adversary record gap on core {}: last record ends {} ns before the victim's",
                        p.core,
                        vl - al
                    ));
                }
            }
            _ => problems.push(format!("adversary on core {} produced no records", p.core)),
        }
    }
    for r in &trace.records {
        let placed = r.core == s.victim.core && r.role == Role::Victim
            || r.role == Role::Adversary && s.adversaries.iter().any(|p| p.core == r.core);
        if !placed {
            problems.push(format!("record on core {} does not match any placement", r.core));
            break;
        }
    }
    if trace
        .header
        .flags
        .iter()
        .any(|f| f.contains("ran on CPU") || f.contains("stopped after"))
    {
        problems.push("stream flags recorded during the run".into());
    }
    if !problems.is_empty() {
        trace.header.valid = false;
        trace.header.flags.extend(problems);
    }
}

/// Victim alone: `samples` records after `warmup` discarded iterations.
pub fn run_isolation(ctx: &HarnessContext, s: &Scenario, rep: u32) -> Result<RunTrace, RunError> {
    if !s.is_isolation() {
        return Err(
            HarnessError::Validation(format!("scenario `{}` has adversaries; isolation runs must not", s.id)).into(),
        );
    }
    s.validate(&ctx.topology)?;
    run_streams(ctx, s, rep)
}

/// Victim against adversaries. Every adversary completes its warmup and one
/// measured iteration before the victim's first measured iteration, and keeps
/// running until the victim's last one completes.
pub fn run_contended(ctx: &HarnessContext, s: &Scenario, rep: u32) -> Result<RunTrace, RunError> {
    if s.is_isolation() {
        return Err(HarnessError::Validation(format!("scenario `{}` has no adversaries", s.id)).into());
    }
    s.validate(&ctx.topology)?;
    run_streams(ctx, s, rep)
}

pub fn run_scenario(ctx: &HarnessContext, s: &Scenario, rep: u32) -> Result<RunTrace, RunError> {
    if s.is_isolation() {
        run_isolation(ctx, s, rep)
    } else {
        run_contended(ctx, s, rep)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioFailure {
    pub scenario: String,
    pub rep: Option<u32>,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct TraceSet {
    pub traces: Vec<RunTrace>,
    pub failures: Vec<ScenarioFailure>,
}

impl TraceSet {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs every scenario x repetition in order, handing each finished trace
/// (including partial traces of failed runs) to `persist` immediately.
/// A failing scenario is recorded and the campaign moves on.
pub fn run_campaign<F>(ctx: &HarnessContext, scenarios: &[Scenario], mut persist: F) -> TraceSet
where
    F: FnMut(&RunTrace) -> Result<(), HarnessError>,
{
    let mut set = TraceSet::default();
    for s in scenarios {
        if let Err(e) = s.validate(&ctx.topology) {
            set.failures.push(ScenarioFailure {
                scenario: s.id.clone(),
                rep: None,
                error: e.to_string(),
            });
            continue;
        }
        for rep in 0..s.repetitions {
            log::info!("running {} rep {rep}", s.id);
            match run_scenario(ctx, s, rep) {
                Ok(trace) => {
                    if let Err(e) = persist(&trace) {
                        set.failures.push(ScenarioFailure {
                            scenario: s.id.clone(),
                            rep: Some(rep),
                            error: e.to_string(),
                        });
                    }
                    set.traces.push(trace);
                }
                Err(RunError { error, partial }) => {
                    if let Some(p) = &partial {
                        let _ = persist(p);
                    }
                    let setup = matches!(
                        error,
                        HarnessError::Setup(_) | HarnessError::SetupTimeout(_) | HarnessError::Capability(_)
                    );
                    set.failures.push(ScenarioFailure {
                        scenario: s.id.clone(),
                        rep: Some(rep),
                        error: error.to_string(),
                    });
                    if setup {
                        // The remaining repetitions would fail the same way.
                        for r in rep + 1..s.repetitions {
                            set.failures.push(ScenarioFailure {
                                scenario: s.id.clone(),
                                rep: Some(r),
                                error: "skipped after setup failure".into(),
                            });
                        }
                        break;
                    }
                }
            }
        }
    }
    set
}

/// Candidate events for observing a channel's use rate, best first.
pub fn usage_events(channel: &InterferenceChannel, t: &Topology) -> Vec<CounterEvent> {
    match channel.resource {
        ResourceKind::PrivateCacheCoherency => vec![CounterEvent::CoherencySnoops],
        ResourceKind::SharedCache | ResourceKind::CacheBank => {
            // Accesses reaching a shared level are misses of the level below.
            let below_is_l1 = channel.cache_level.is_some_and(|l| l <= 2)
                || t.cache_levels.iter().all(|c| c.level == 1 || c.is_shared());
            if below_is_l1 {
                vec![CounterEvent::L1dMisses]
            } else {
                vec![CounterEvent::SharedCacheMisses, CounterEvent::L1dMisses]
            }
        }
        ResourceKind::DramBandwidth | ResourceKind::DramBank => {
            vec![CounterEvent::DramReads, CounterEvent::LlcMisses]
        }
        ResourceKind::Interconnect => vec![CounterEvent::BusCycles],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRate {
    pub event: CounterEvent,
    /// Events per millisecond.
    pub peak: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceUsageProfile {
    pub workload: String,
    pub rates: BTreeMap<String, ChannelRate>,
    /// Channels no available counter could observe. Never reported as zero.
    pub unobserved: Vec<String>,
}

/// Per-channel rates from records carrying counter deltas. Returns
/// (rates, unobserved).
pub fn channel_rates<'a, I>(
    records: I,
    catalog: &ChannelCatalog,
    t: &Topology,
) -> (BTreeMap<String, ChannelRate>, Vec<String>)
where
    I: IntoIterator<Item = &'a TraceRecord> + Clone,
{
    let mut rates = BTreeMap::new();
    let mut unobserved = Vec::new();
    for ch in &catalog.channels {
        let chosen = usage_events(ch, t)
            .into_iter()
            .find(|e| records.clone().into_iter().any(|r| r.ctr.contains_key(e)));
        let Some(event) = chosen else {
            unobserved.push(ch.id.clone());
            continue;
        };
        let (mut peak, mut total, mut total_ms) = (0f64, 0f64, 0f64);
        for r in records.clone() {
            if let Some(&d) = r.ctr.get(&event) {
                let ms = r.duration_ns() as f64 / 1e6;
                peak = peak.max(d as f64 / ms);
                total += d as f64;
                total_ms += ms;
            }
        }
        let mean = if total_ms > 0.0 { total / total_ms } else { 0.0 };
        rates.insert(ch.id.clone(), ChannelRate { event, peak, mean });
    }
    (rates, unobserved)
}

/// Runs `w` alone on `core` with every usage counter enabled and reports
/// per-channel peak and mean rates.
pub fn fingerprint(
    ctx: &HarnessContext,
    w: &Workload,
    core: CoreId,
    catalog: &ChannelCatalog,
    samples: u64,
    warmup: u64,
) -> Result<ResourceUsageProfile, HarnessError> {
    let backend = ctx
        .backend
        .as_ref()
        .ok_or_else(|| HarnessError::Capability("fingerprinting needs a counter backend".into()))?;
    // Fail early and distinctly when the backend cannot count at all.
    backend.open(core)?;
    let mut events: Vec<CounterEvent> = catalog
        .channels
        .iter()
        .flat_map(|c| usage_events(c, &ctx.topology))
        .collect();
    events.sort();
    events.dedup();
    let scenario = Scenario {
        id: format!("fingerprint-{}", sanitize(&w.label)),
        phase: Phase::Software,
        channel: String::new(),
        victim: Placement {
            core,
            workload: w.clone(),
        },
        adversaries: Vec::new(),
        samples,
        warmup,
        counters: events,
        repetitions: 1,
        baseline: None,
    };
    let trace = run_isolation(ctx, &scenario, 0).map_err(|e| e.error)?;
    let (rates, unobserved) = channel_rates(trace.victim_records().collect::<Vec<_>>(), catalog, &ctx.topology);
    Ok(ResourceUsageProfile {
        workload: w.label.clone(),
        rates,
        unobserved,
    })
}

/// Replaces characters outside [A-Za-z0-9._-] with `_`.
pub fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Ping-pong handshake between the first core and every other core.
/// offset = remote stamp - midpoint of the local round trip.
pub fn measure_clock_skew(t: &Topology, map: &CoreMap, rounds: usize) -> Result<ClockSkew, HarnessError> {
    let mut skew = ClockSkew::default();
    let Some(&reference) = t.core_ids.first() else {
        return Ok(skew);
    };
    let ref_cpu = map
        .cpu(reference)
        .ok_or_else(|| HarnessError::Validation(format!("core {reference} has no CPU mapping")))?;
    let mut min_rtt = u64::MAX;
    for &core in &t.core_ids[1..] {
        let cpu = map
            .cpu(core)
            .ok_or_else(|| HarnessError::Validation(format!("core {core} has no CPU mapping")))?;
        let turn = AtomicU64::new(0);
        let stamp = AtomicU64::new(0);
        let spin = |want: u64| {
            while turn.load(Ordering::Acquire) != want {
                thread::yield_now();
            }
        };
        let (best_offset, best_rtt) = thread::scope(|scope| -> Result<(i64, u64), HarnessError> {
            let remote = scope.spawn(|| -> Result<(), HarnessError> {
                affinity::pin_current_thread(cpu)?;
                for r in 0..rounds as u64 {
                    spin(2 * r + 1);
                    stamp.store(monotonic_ns(), Ordering::Release);
                    turn.store(2 * r + 2, Ordering::Release);
                }
                Ok(())
            });
            affinity::pin_current_thread(ref_cpu)?;
            let mut best = (0i64, u64::MAX);
            for r in 0..rounds as u64 {
                let t0 = monotonic_ns();
                turn.store(2 * r + 1, Ordering::Release);
                spin(2 * r + 2);
                let t1 = monotonic_ns();
                let remote_ns = stamp.load(Ordering::Acquire);
                let rtt = t1 - t0;
                if rtt < best.1 {
                    best = (remote_ns as i64 - (t0 + rtt / 2) as i64, rtt);
                }
            }
            remote.join().expect("skew probe panicked")?;
            Ok(best)
        })?;
        skew.offsets_ns.insert(core, best_offset);
        skew.max_abs_offset_ns = skew.max_abs_offset_ns.max(best_offset.unsigned_abs());
        min_rtt = min_rtt.min(best_rtt);
    }
    skew.min_round_trip_ns = if min_rtt == u64::MAX { 0 } else { min_rtt };
    if let Ok(all) = affinity::allowed_cpus() {
        let _ = affinity::restore_affinity(&all);
    }
    Ok(skew)
}
