//! Core pinning through the OS affinity facility.
//!
//! Logical topology cores map onto OS CPUs. The mapping is the identity
//! unless `MCINT_CORE_LIST` supplies one OS CPU per topology core, in
//! topology order (e.g. `0,2,4,6`).

use std::collections::BTreeMap;
use std::io;

use super::HarnessError;
use crate::platform::{CoreId, Topology};

pub const CORE_LIST_ENV: &str = "MCINT_CORE_LIST";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreMap(BTreeMap<CoreId, usize>);

impl CoreMap {
    pub fn identity(t: &Topology) -> Self {
        CoreMap(t.core_ids.iter().map(|&c| (c, c as usize)).collect())
    }

    pub fn from_list(t: &Topology, list: &str) -> Result<Self, HarnessError> {
        let cpus: Vec<usize> = list
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| HarnessError::Validation(format!("{CORE_LIST_ENV}: {e}")))?;
        if cpus.len() != t.core_ids.len() {
            return Err(HarnessError::Validation(format!(
                "{CORE_LIST_ENV} lists {} CPUs for {} topology cores",
                cpus.len(),
                t.core_ids.len()
            )));
        }
        Ok(CoreMap(t.core_ids.iter().copied().zip(cpus).collect()))
    }

    pub fn from_env(t: &Topology) -> Result<Self, HarnessError> {
        match std::env::var(CORE_LIST_ENV) {
            Ok(list) if !list.trim().is_empty() => Self::from_list(t, &list),
            _ => Ok(Self::identity(t)),
        }
    }

    pub fn cpu(&self, core: CoreId) -> Option<usize> {
        self.0.get(&core).copied()
    }

    pub fn as_map(&self) -> &BTreeMap<CoreId, usize> {
        &self.0
    }

    /// Verifies every mapped CPU is in this process's allowed set and that
    /// the calling thread may change its affinity.
    pub fn check_capability(&self) -> Result<(), HarnessError> {
        let allowed =
            allowed_cpus().map_err(|e| HarnessError::Capability(format!("cannot query CPU affinity: {e}")))?;
        for (core, cpu) in &self.0 {
            if !allowed.contains(cpu) {
                return Err(HarnessError::Capability(format!(
                    "topology core {core} maps to CPU {cpu}, which this process may not run on (allowed: {allowed:?}); set {CORE_LIST_ENV} to remap"
                )));
            }
        }
        if let Some(&cpu) = self.0.values().next() {
            let previous = allowed.clone();
            pin_current_thread(cpu).map_err(|e| HarnessError::Capability(format!("sched_setaffinity failed: {e}")))?;
            restore_affinity(&previous)
                .map_err(|e| HarnessError::Capability(format!("sched_setaffinity failed: {e}")))?;
        }
        Ok(())
    }
}

#[cfg(target_os = "linux")]
pub fn allowed_cpus() -> io::Result<Vec<usize>> {
    // SAFETY: cpu_set_t is plain data; sched_getaffinity fills it.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok((0..libc::CPU_SETSIZE as usize)
            .filter(|&c| libc::CPU_ISSET(c, &set))
            .collect())
    }
}

#[cfg(target_os = "linux")]
fn set_affinity(cpus: &[usize]) -> io::Result<()> {
    // SAFETY: cpu_set_t is plain data; indices are bounds-checked below.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        for &c in cpus {
            if c >= libc::CPU_SETSIZE as usize {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidInput,
                    format!("CPU {c} out of range"),
                ));
            }
            libc::CPU_SET(c, &mut set);
        }
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(io::Error::last_os_error());
        }
    }
    Ok(())
}

#[cfg(target_os = "linux")]
pub fn pin_current_thread(cpu: usize) -> io::Result<()> {
    set_affinity(&[cpu])
}

#[cfg(target_os = "linux")]
pub fn restore_affinity(cpus: &[usize]) -> io::Result<()> {
    set_affinity(cpus)
}

/// CPU the calling thread is running on right now.
#[cfg(target_os = "linux")]
pub fn current_cpu() -> Option<usize> {
    // SAFETY: no arguments; returns -1 on failure.
    let c = unsafe { libc::sched_getcpu() };
    (c >= 0).then_some(c as usize)
}

#[cfg(not(target_os = "linux"))]
pub fn allowed_cpus() -> io::Result<Vec<usize>> {
    Err(io::Error::new(io::ErrorKind::Unsupported, "affinity requires Linux"))
}

#[cfg(not(target_os = "linux"))]
pub fn pin_current_thread(_cpu: usize) -> io::Result<()> {
    Err(io::Error::new(io::ErrorKind::Unsupported, "affinity requires Linux"))
}

#[cfg(not(target_os = "linux"))]
pub fn restore_affinity(_cpus: &[usize]) -> io::Result<()> {
    Err(io::Error::new(io::ErrorKind::Unsupported, "affinity requires Linux"))
}

#[cfg(not(target_os = "linux"))]
pub fn current_cpu() -> Option<usize> {
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::platform::load_topology;

    fn topo() -> Topology {
        load_topology(r#"{"cores": [0, 1, 2], "line_size": 64, "caches": [], "dram_nodes": 1}"#).unwrap()
    }

    #[test]
    fn list_override() {
        let m = CoreMap::from_list(&topo(), "4, 4,5").unwrap();
        assert_eq!(m.cpu(1), Some(4));
        assert_eq!(m.cpu(2), Some(5));
        assert!(CoreMap::from_list(&topo(), "0,1").is_err());
        assert!(CoreMap::from_list(&topo(), "0,x,1").is_err());
    }

    #[test]
    fn unreachable_cpu_is_capability_error() {
        let m = CoreMap::from_list(&topo(), "0,0,1023").unwrap();
        assert!(matches!(m.check_capability(), Err(HarnessError::Capability(_))));
    }

    #[test]
    fn pin_to_an_allowed_cpu() {
        let cpus = allowed_cpus().unwrap();
        let first = cpus[0];
        std::thread::spawn(move || {
            pin_current_thread(first).unwrap();
            assert_eq!(current_cpu(), Some(first));
        })
        .join()
        .unwrap();
    }
}
