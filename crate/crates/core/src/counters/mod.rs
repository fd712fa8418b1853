//! Performance-monitoring counter abstraction.
//!
//! A [`CounterBackend`] hands out per-core [`CounterHandle`]s. Reads bracket a
//! measured region ([`read_window`]); counters are only trusted for an event
//! once [`verify_counter`] has passed it against a known-count kernel.

mod native;
mod simulated;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{self, Arena, KernelError, KernelRunner};
use crate::platform::{CoreId, Topology};

pub use native::{CoreTypeMapping, EventCode, NativeBackend, NativeMapping};
pub use simulated::{ScriptEntry, SimulatedBackend, SimulatedModel, SimulationMode};

#[derive(Debug, Error)]
pub enum CounterError {
    #[error("counter capability unavailable: {0}")]
    Capability(String),
    #[error("simulated counter model error: {0}")]
    Model(String),
    #[error("invalid counter configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CounterEvent {
    LoadsRetired,
    StoresRetired,
    L1dMisses,
    SharedCacheMisses,
    LlcMisses,
    DramReads,
    BusCycles,
    CoherencySnoops,
}

impl CounterEvent {
    pub const ALL: [CounterEvent; 8] = [
        CounterEvent::LoadsRetired,
        CounterEvent::StoresRetired,
        CounterEvent::L1dMisses,
        CounterEvent::SharedCacheMisses,
        CounterEvent::LlcMisses,
        CounterEvent::DramReads,
        CounterEvent::BusCycles,
        CounterEvent::CoherencySnoops,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CounterEvent::LoadsRetired => "LOADS_RETIRED",
            CounterEvent::StoresRetired => "STORES_RETIRED",
            CounterEvent::L1dMisses => "L1D_MISSES",
            CounterEvent::SharedCacheMisses => "SHARED_CACHE_MISSES",
            CounterEvent::LlcMisses => "LLC_MISSES",
            CounterEvent::DramReads => "DRAM_READS",
            CounterEvent::BusCycles => "BUS_CYCLES",
            CounterEvent::CoherencySnoops => "COHERENCY_SNOOPS",
        }
    }

    /// Retired loads and stores are fixed by the program; everything else
    /// depends on microarchitectural state.
    pub fn is_program_controlled(self) -> bool {
        matches!(self, CounterEvent::LoadsRetired | CounterEvent::StoresRetired)
    }
}

impl fmt::Display for CounterEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CounterEvent {
    type Err = CounterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CounterEvent::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| CounterError::Config(format!("unknown counter event `{s}`")))
    }
}

/// Architectural activity of a measured region, as far as the program
/// itself can account for it. Only the simulated backend consumes this.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Activity {
    pub loads: u64,
    pub stores: u64,
    pub l1d_misses: u64,
    pub shared_cache_misses: u64,
    pub llc_misses: u64,
    pub dram_reads: u64,
    pub bus_cycles: u64,
    pub snoops: u64,
}

impl Activity {
    pub fn count(&self, event: CounterEvent) -> u64 {
        match event {
            CounterEvent::LoadsRetired => self.loads,
            CounterEvent::StoresRetired => self.stores,
            CounterEvent::L1dMisses => self.l1d_misses,
            CounterEvent::SharedCacheMisses => self.shared_cache_misses,
            CounterEvent::LlcMisses => self.llc_misses,
            CounterEvent::DramReads => self.dram_reads,
            CounterEvent::BusCycles => self.bus_cycles,
            CounterEvent::CoherencySnoops => self.snoops,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reading {
    Value(u64),
    Unmapped,
}

/// Counter access bound to one core's execution stream.
pub trait CounterHandle {
    fn read(&mut self, event: CounterEvent) -> Result<Reading, CounterError>;

    /// Whether `read(event)` can return a value. Does not consume a reading.
    fn observes(&self, _event: CounterEvent) -> bool {
        true
    }

    /// Width of the hardware counter; deltas wrap modulo `2^bits`.
    fn counter_bits(&self) -> u32 {
        64
    }

    /// Informs the handle of the region's architectural activity.
    fn advance(&mut self, _activity: &Activity) {}
}

pub trait CounterBackend: Send + Sync {
    fn name(&self) -> String;

    /// Opens a handle for `core`. Must be called on the stream that will
    /// perform the reads.
    fn open(&self, core: CoreId) -> Result<Box<dyn CounterHandle>, CounterError>;
}

pub fn wrapping_delta(begin: u64, end: u64, bits: u32) -> u64 {
    let d = end.wrapping_sub(begin);
    if bits >= 64 {
        d
    } else {
        d & ((1u64 << bits) - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterWindow {
    pub core: CoreId,
    pub event: CounterEvent,
    pub begin: u64,
    pub end: u64,
    pub delta: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowResult {
    Window(CounterWindow),
    Unsupported(CounterEvent),
}

impl WindowResult {
    pub fn delta(&self) -> Option<u64> {
        match self {
            WindowResult::Window(w) => Some(w.delta),
            WindowResult::Unsupported(_) => None,
        }
    }

    pub fn event(&self) -> CounterEvent {
        match self {
            WindowResult::Window(w) => w.event,
            WindowResult::Unsupported(e) => *e,
        }
    }
}

/// Brackets `region` with reads of `events` in declared order. The region
/// returns its own activity, which is forwarded to the handle before the
/// closing reads.
pub fn read_window<F>(
    handle: &mut dyn CounterHandle,
    core: CoreId,
    events: &[CounterEvent],
    region: F,
) -> Result<Vec<WindowResult>, CounterError>
where
    F: FnOnce() -> Activity,
{
    let mut begins = Vec::with_capacity(events.len());
    for &e in events {
        begins.push(handle.read(e)?);
    }
    let activity = region();
    handle.advance(&activity);
    let bits = handle.counter_bits();
    let mut out = Vec::with_capacity(events.len());
    for (&event, begin) in events.iter().zip(begins) {
        let end = handle.read(event)?;
        out.push(match (begin, end) {
            (Reading::Value(begin), Reading::Value(end)) => WindowResult::Window(CounterWindow {
                core,
                event,
                begin,
                end,
                delta: wrapping_delta(begin, end, bits),
            }),
            _ => WindowResult::Unsupported(event),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerdictStatus {
    Pass,
    Fail,
    Unsupported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterVerdict {
    pub event: CounterEvent,
    pub expected: u64,
    pub observed: Option<u64>,
    /// Allowed absolute deviation from `expected`.
    pub band: u64,
    pub status: VerdictStatus,
    pub note: String,
}

impl CounterVerdict {
    fn unsupported(event: CounterEvent, note: String) -> Self {
        CounterVerdict {
            event,
            expected: 0,
            observed: None,
            band: 0,
            status: VerdictStatus::Unsupported,
            note,
        }
    }
}

/// Default relative tolerance for verifying `event`: exact for retired
/// loads/stores, 5% for microarchitectural events.
pub fn default_tolerance(event: CounterEvent) -> f64 {
    if event.is_program_controlled() {
        0.0
    } else {
        0.05
    }
}

/// Accesses performed by a verification kernel.
pub const VERIFY_OPS: u64 = 100_000;

/// Runs the known-count kernel for `event` on the calling stream (assumed
/// pinned to the topology's first core) and judges the counter against it.
pub fn verify_counter(
    backend: &dyn CounterBackend,
    event: CounterEvent,
    t: &Topology,
    tolerance: f64,
) -> Result<CounterVerdict, CounterError> {
    verify_counter_with(backend, event, t, tolerance, VERIFY_OPS)
}

pub fn verify_counter_with(
    backend: &dyn CounterBackend,
    event: CounterEvent,
    t: &Topology,
    tolerance: f64,
    k: u64,
) -> Result<CounterVerdict, CounterError> {
    let (spec, model) = match kernels::known_count_kernel(event, k, t) {
        Ok(pair) => pair,
        Err(KernelError::UnsupportedEvent(_)) => {
            return Ok(CounterVerdict::unsupported(
                event,
                "no kernel with a closed-form count exists for this event".into(),
            ))
        }
        Err(e) => return Err(e.into()),
    };
    let core = t.core_ids[0];
    let arena = Arena::build(&spec, t.line_size)?;
    let mut runner = KernelRunner::new(&spec, &arena)?;
    // Warm pass over the whole working set so the steady-state model applies.
    runner.run_ops(arena.lines() as u64, |_| {});
    let mut handle = backend.open(core)?;
    let activity = kernels::kernel_activity(&spec, t, core, spec.inner_ops);
    let windows = read_window(handle.as_mut(), core, &[event], || {
        runner.iterate();
        activity
    })?;
    std::hint::black_box(runner.checksum());
    let observed = match windows[0] {
        WindowResult::Window(w) => w.delta,
        WindowResult::Unsupported(_) => {
            return Ok(CounterVerdict::unsupported(
                event,
                format!("event is not mapped by backend `{}`", backend.name()),
            ))
        }
    };
    let band = (tolerance.max(0.0) * model.expected as f64).round() as u64 + model.slack;
    let pass = observed.abs_diff(model.expected) <= band;
    Ok(CounterVerdict {
        event,
        expected: model.expected,
        observed: Some(observed),
        band,
        status: if pass { VerdictStatus::Pass } else { VerdictStatus::Fail },
        note: format!(
            "{:?} kernel, {} accesses over {} bytes",
            spec.pattern, spec.inner_ops, spec.working_set
        ),
    })
}

/// Counter backend choice, as named by the `MCINT_COUNTERS` environment variable:
/// `native`, `native:<mapping file>`, `simulated` or `simulated:<script file>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSelector {
    Native(Option<String>),
    Simulated(Option<String>),
}

pub const BACKEND_ENV: &str = "MCINT_COUNTERS";

impl FromStr for BackendSelector {
    type Err = CounterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, path) = match s.split_once(':') {
            Some((k, p)) => (k, Some(p.to_string())),
            None => (s, None),
        };
        match kind {
            "native" => Ok(BackendSelector::Native(path)),
            "simulated" => Ok(BackendSelector::Simulated(path)),
            other => Err(CounterError::Config(format!(
                "unknown counter backend `{other}` (expected native or simulated)"
            ))),
        }
    }
}

impl BackendSelector {
    pub fn from_env() -> Result<Self, CounterError> {
        match std::env::var(BACKEND_ENV) {
            Ok(v) if !v.is_empty() => v.parse(),
            _ => Ok(BackendSelector::Native(None)),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn CounterBackend>, CounterError> {
        let read = |path: &str| {
            std::fs::read_to_string(path).map_err(|e| CounterError::Config(format!("cannot read `{path}`: {e}")))
        };
        match self {
            BackendSelector::Native(None) => Ok(Arc::new(NativeBackend::new(NativeMapping::generic()))),
            BackendSelector::Native(Some(path)) => {
                Ok(Arc::new(NativeBackend::new(NativeMapping::parse(&read(path)?)?)))
            }
            BackendSelector::Simulated(None) => Ok(Arc::new(SimulatedBackend::new(SimulatedModel::default()))),
            BackendSelector::Simulated(Some(path)) => {
                Ok(Arc::new(SimulatedBackend::new(SimulatedModel::parse(&read(path)?)?)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::platform::load_topology;

    fn topo() -> Topology {
        load_topology(
            r#"{"cores": [0,1], "line_size": 64, "caches": [
                {"level": 1, "capacity": 4096, "associativity": 4, "shared_by": [0]},
                {"level": 1, "capacity": 4096, "associativity": 4, "shared_by": [1]},
                {"level": 2, "capacity": 65536, "associativity": 8, "shared_by": [0,1]}
            ], "dram_nodes": 1}"#,
        )
        .unwrap()
    }

    fn scripted(entries: Vec<ScriptEntry>) -> SimulatedBackend {
        SimulatedBackend::new(SimulatedModel {
            mode: SimulationMode::Scripted,
            script: entries,
            ..SimulatedModel::default()
        })
    }

    #[test]
    fn empty_event_list() {
        let b = SimulatedBackend::new(SimulatedModel::default());
        let mut h = b.open(0).unwrap();
        let w = read_window(h.as_mut(), 0, &[], Activity::default).unwrap();
        assert!(w.is_empty());
    }

    #[test]
    fn scripted_delta() {
        let b = scripted(vec![ScriptEntry {
            core: 0,
            event: CounterEvent::LoadsRetired,
            values: vec![100, 350],
        }]);
        let mut h = b.open(0).unwrap();
        let w = read_window(h.as_mut(), 0, &[CounterEvent::LoadsRetired], Activity::default).unwrap();
        assert_eq!(w[0].delta(), Some(250));
        match w[0] {
            WindowResult::Window(w) => assert_eq!((w.begin, w.end), (100, 350)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn unmapped_event_is_marked() {
        let b = SimulatedBackend::new(SimulatedModel::default());
        let mut h = b.open(0).unwrap();
        let events = [
            CounterEvent::LoadsRetired,
            CounterEvent::BusCycles,
            CounterEvent::StoresRetired,
        ];
        let w = read_window(h.as_mut(), 0, &events, || Activity {
            loads: 5,
            stores: 3,
            ..Activity::default()
        })
        .unwrap();
        assert_eq!(w[0].delta(), Some(5));
        assert_eq!(w[1], WindowResult::Unsupported(CounterEvent::BusCycles));
        assert_eq!(w[2].delta(), Some(3));
        let order: Vec<_> = w.iter().map(|r| r.event()).collect();
        assert_eq!(order, events);
    }

    #[test]
    fn unscripted_query_is_model_error() {
        let b = scripted(vec![ScriptEntry {
            core: 0,
            event: CounterEvent::LoadsRetired,
            values: vec![0, 1000],
        }]);
        let mut h = b.open(1).unwrap();
        assert!(matches!(
            h.read(CounterEvent::StoresRetired),
            Err(CounterError::Model(_))
        ));
        let mut h0 = b.open(0).unwrap();
        let w = read_window(h0.as_mut(), 0, &[CounterEvent::LoadsRetired], Activity::default).unwrap();
        assert_eq!(w[0].delta(), Some(1000));
        // Script exhausted.
        assert!(h0.read(CounterEvent::LoadsRetired).is_err());
    }

    #[test]
    fn wraparound_normalized() {
        let b = SimulatedBackend::new(SimulatedModel {
            mode: SimulationMode::Scripted,
            counter_bits: 48,
            script: vec![ScriptEntry {
                core: 0,
                event: CounterEvent::LlcMisses,
                values: vec![(1u64 << 48) - 10, 5],
            }],
            ..SimulatedModel::default()
        });
        let mut h = b.open(0).unwrap();
        let w = read_window(h.as_mut(), 0, &[CounterEvent::LlcMisses], Activity::default).unwrap();
        assert_eq!(w[0].delta(), Some(15));
        assert_eq!(wrapping_delta(u64::MAX - 1, 3, 64), 5);
    }

    #[test]
    fn faithful_loads_pass() {
        let b = SimulatedBackend::new(SimulatedModel::default());
        let v = verify_counter_with(&b, CounterEvent::LoadsRetired, &topo(), 0.01, 1000).unwrap();
        assert_eq!(v.status, VerdictStatus::Pass);
        assert_eq!(v.observed, Some(1000));
    }

    #[test]
    fn double_count_fails() {
        let b = SimulatedBackend::new(SimulatedModel {
            mode: SimulationMode::Overcount,
            ..SimulatedModel::default()
        });
        let v = verify_counter_with(&b, CounterEvent::LoadsRetired, &topo(), 0.01, 1000).unwrap();
        assert_eq!(v.status, VerdictStatus::Fail);
        assert_eq!(v.observed, Some(2000));
    }

    #[test]
    fn no_kernel_is_unsupported() {
        let b = SimulatedBackend::new(SimulatedModel::default());
        let v = verify_counter_with(&b, CounterEvent::CoherencySnoops, &topo(), 0.05, 1000).unwrap();
        assert_eq!(v.status, VerdictStatus::Unsupported);
    }

    #[test]
    fn selector_parsing() {
        assert_eq!(
            "native".parse::<BackendSelector>().unwrap(),
            BackendSelector::Native(None)
        );
        assert_eq!(
            "simulated:/tmp/s.json".parse::<BackendSelector>().unwrap(),
            BackendSelector::Simulated(Some("/tmp/s.json".into()))
        );
        assert!("papi".parse::<BackendSelector>().is_err());
    }
}
