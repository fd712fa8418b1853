//! Linux `perf_event_open` backend.
//!
//! Event codes come from a mapping document so new platforms need no
//! rebuild. Each handle counts the calling thread in user mode only.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{CounterBackend, CounterError, CounterEvent, CounterHandle, Reading};
use crate::platform::CoreId;

/// A raw `perf_event_attr` type/config pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventCode {
    #[serde(rename = "type")]
    pub kind: u32,
    pub config: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreTypeMapping {
    pub name: String,
    /// Cores of this type; `None` matches every core.
    #[serde(default)]
    pub cores: Option<BTreeSet<CoreId>>,
    pub events: BTreeMap<CounterEvent, EventCode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NativeMapping {
    pub core_types: Vec<CoreTypeMapping>,
}

const PERF_TYPE_HARDWARE: u32 = 0;
const PERF_TYPE_HW_CACHE: u32 = 3;
const HW_CACHE_L1D: u64 = 0;
const HW_CACHE_LL: u64 = 2;
const HW_CACHE_OP_READ: u64 = 0;
const HW_CACHE_OP_WRITE: u64 = 1;
const PERF_FLAG_FD_CLOEXEC: libc::c_ulong = 8;
const HW_CACHE_RESULT_ACCESS: u64 = 0;
const HW_CACHE_RESULT_MISS: u64 = 1;
const HW_CACHE_MISSES: u64 = 3;
const HW_BUS_CYCLES: u64 = 6;

fn cache_code(cache: u64, op: u64, result: u64) -> EventCode {
    EventCode {
        kind: PERF_TYPE_HW_CACHE,
        config: cache | (op << 8) | (result << 16),
    }
}

impl NativeMapping {
    /// Kernel-generic events; DRAM reads and snoops have no generic code.
    pub fn generic() -> Self {
        let events = [
            (
                CounterEvent::LoadsRetired,
                cache_code(HW_CACHE_L1D, HW_CACHE_OP_READ, HW_CACHE_RESULT_ACCESS),
            ),
            (
                CounterEvent::StoresRetired,
                cache_code(HW_CACHE_L1D, HW_CACHE_OP_WRITE, HW_CACHE_RESULT_ACCESS),
            ),
            (
                CounterEvent::L1dMisses,
                cache_code(HW_CACHE_L1D, HW_CACHE_OP_READ, HW_CACHE_RESULT_MISS),
            ),
            (
                CounterEvent::SharedCacheMisses,
                cache_code(HW_CACHE_LL, HW_CACHE_OP_READ, HW_CACHE_RESULT_MISS),
            ),
            (
                CounterEvent::LlcMisses,
                EventCode {
                    kind: PERF_TYPE_HARDWARE,
                    config: HW_CACHE_MISSES,
                },
            ),
            (
                CounterEvent::BusCycles,
                EventCode {
                    kind: PERF_TYPE_HARDWARE,
                    config: HW_BUS_CYCLES,
                },
            ),
        ]
        .into_iter()
        .collect();
        NativeMapping {
            core_types: vec![CoreTypeMapping {
                name: "generic".into(),
                cores: None,
                events,
            }],
        }
    }

    pub fn parse(text: &str) -> Result<Self, CounterError> {
        let mapping: NativeMapping =
            serde_json::from_str(text).map_err(|e| CounterError::Config(format!("counter mapping: {e}")))?;
        if mapping.core_types.is_empty() {
            return Err(CounterError::Config("counter mapping lists no core types".into()));
        }
        Ok(mapping)
    }

    pub fn for_core(&self, core: CoreId) -> Option<&CoreTypeMapping> {
        self.core_types
            .iter()
            .find(|t| t.cores.as_ref().is_none_or(|c| c.contains(&core)))
    }
}

#[derive(Debug, Clone)]
pub struct NativeBackend {
    mapping: NativeMapping,
}

impl NativeBackend {
    pub fn new(mapping: NativeMapping) -> Self {
        NativeBackend { mapping }
    }
}

impl CounterBackend for NativeBackend {
    fn name(&self) -> String {
        "native (perf_event_open)".into()
    }

    fn open(&self, core: CoreId) -> Result<Box<dyn CounterHandle>, CounterError> {
        let table = self
            .mapping
            .for_core(core)
            .ok_or_else(|| CounterError::Config(format!("no core type maps core {core}")))?;
        imp::open(table)
    }
}

#[cfg(target_os = "linux")]
mod imp {
    use std::collections::BTreeMap;
    use std::io;

    use super::*;

    /// Prefix of `struct perf_event_attr` up to `config2` (PERF_ATTR_SIZE_VER1).
    #[repr(C)]
    #[derive(Default)]
    struct PerfEventAttr {
        kind: u32,
        size: u32,
        config: u64,
        sample_period: u64,
        sample_type: u64,
        read_format: u64,
        flags: u64,
        wakeup_events: u32,
        bp_type: u32,
        config1: u64,
        config2: u64,
    }

    const FLAG_EXCLUDE_KERNEL: u64 = 1 << 5;
    const FLAG_EXCLUDE_HV: u64 = 1 << 6;

    struct Fd(libc::c_int);

    impl Drop for Fd {
        fn drop(&mut self) {
            // SAFETY: fd was returned by perf_event_open and is owned here.
            unsafe { libc::close(self.0) };
        }
    }

    pub(super) struct PerfHandle {
        fds: BTreeMap<CounterEvent, Fd>,
    }

    fn perf_event_open(code: EventCode) -> io::Result<Fd> {
        let attr = PerfEventAttr {
            kind: code.kind,
            size: std::mem::size_of::<PerfEventAttr>() as u32,
            config: code.config,
            flags: FLAG_EXCLUDE_KERNEL | FLAG_EXCLUDE_HV,
            ..PerfEventAttr::default()
        };
        // SAFETY: attr is a valid, initialized perf_event_attr prefix whose
        // size field matches; pid 0 / cpu -1 counts the calling thread.
        let fd = unsafe {
            libc::syscall(
                libc::SYS_perf_event_open,
                &attr as *const PerfEventAttr,
                0 as libc::pid_t,
                -1 as libc::c_int,
                -1 as libc::c_int,
                PERF_FLAG_FD_CLOEXEC,
            )
        };
        if fd < 0 {
            Err(io::Error::last_os_error())
        } else {
            Ok(Fd(fd as libc::c_int))
        }
    }

    pub(super) fn open(table: &CoreTypeMapping) -> Result<Box<dyn CounterHandle>, CounterError> {
        let mut fds = BTreeMap::new();
        for (&event, &code) in &table.events {
            match perf_event_open(code) {
                Ok(fd) => {
                    fds.insert(event, fd);
                }
                Err(e) => match e.raw_os_error() {
                    Some(libc::EACCES) | Some(libc::EPERM) | Some(libc::ENOSYS) => {
                        return Err(CounterError::Capability(format!(
                            "perf_event_open denied ({e}); check kernel.perf_event_paranoid or CAP_PERFMON"
                        )))
                    }
                    // The PMU does not implement this event: leave it unmapped.
                    _ => {}
                },
            }
        }
        Ok(Box::new(PerfHandle { fds }))
    }

    impl CounterHandle for PerfHandle {
        fn observes(&self, event: CounterEvent) -> bool {
            self.fds.contains_key(&event)
        }

        fn read(&mut self, event: CounterEvent) -> Result<Reading, CounterError> {
            let Some(fd) = self.fds.get(&event) else {
                return Ok(Reading::Unmapped);
            };
            let mut value: u64 = 0;
            // SAFETY: reading 8 bytes into a u64 from an owned perf fd.
            let n = unsafe { libc::read(fd.0, &mut value as *mut u64 as *mut libc::c_void, 8) };
            if n != 8 {
                return Err(CounterError::Capability(format!(
                    "reading {event} failed: {}",
                    io::Error::last_os_error()
                )));
            }
            Ok(Reading::Value(value))
        }
    }
}

#[cfg(not(target_os = "linux"))]
mod imp {
    use super::*;

    pub(super) fn open(_table: &CoreTypeMapping) -> Result<Box<dyn CounterHandle>, CounterError> {
        Err(CounterError::Capability(
            "native counters require Linux perf_event_open".into(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_document() {
        let m = NativeMapping::parse(
            r#"{"core_types": [
                {"name": "big", "cores": [0, 1], "events": {"LOADS_RETIRED": {"type": 4, "config": 464}}},
                {"name": "little", "events": {"LLC_MISSES": {"type": 0, "config": 3}}}
            ]}"#,
        )
        .unwrap();
        assert_eq!(m.for_core(1).unwrap().name, "big");
        assert_eq!(m.for_core(7).unwrap().name, "little");
        assert!(NativeMapping::parse(r#"{"core_types": []}"#).is_err());
    }

    #[test]
    fn generic_mapping_leaves_dram_unmapped() {
        let m = NativeMapping::generic();
        let t = m.for_core(0).unwrap();
        assert!(!t.events.contains_key(&CounterEvent::DramReads));
        assert!(!t.events.contains_key(&CounterEvent::CoherencySnoops));
    }

    #[test]
    fn native_open_is_capability_checked() {
        // Either perf works on this host or the failure is a capability error.
        match NativeBackend::new(NativeMapping::generic()).open(0) {
            Ok(mut h) => {
                let _ = h.read(CounterEvent::LoadsRetired).unwrap();
            }
            Err(e) => assert!(matches!(e, CounterError::Capability(_)), "{e}"),
        }
    }
}
