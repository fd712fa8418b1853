//! Interference-generator kernels.
//!
//! Each kernel hammers one resource with a fixed access pattern over a
//! prepared [`Arena`]. One measured iteration executes `inner_ops` accesses;
//! intensity is controlled by that count alone.

use std::alloc::{self, Layout};
use std::hint::black_box;
use std::ptr::NonNull;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counters::{Activity, CounterEvent};
use crate::platform::{CoreId, InterferenceChannel, ResourceKind, Topology};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid kernel spec: {0}")]
    Spec(String),
    #[error("channel `{0}` does not resolve to a cache level or memory in the topology")]
    Unresolved(String),
    #[error("calibration did not converge in {rounds} rounds; last medians (ns): {medians:?}")]
    Calibration { rounds: usize, medians: Vec<u64> },
    #[error("no known-count kernel exists for {0}")]
    UnsupportedEvent(CounterEvent),
    #[error("arena allocation of {0} bytes failed")]
    Alloc(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AccessPattern {
    SeqRead,
    SeqWrite,
    StridedRead,
    StridedWrite,
    PointerChase,
    SharedLinePingpong,
}

impl AccessPattern {
    pub fn is_strided(self) -> bool {
        matches!(self, AccessPattern::StridedRead | AccessPattern::StridedWrite)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    /// Channel id this kernel stresses.
    pub target: String,
    pub pattern: AccessPattern,
    pub working_set: u64,
    pub stride: u64,
    pub inner_ops: u64,
    pub seed: u64,
}

impl KernelSpec {
    pub fn validate(&self, line_size: u64) -> Result<(), KernelError> {
        if self.working_set < line_size || !self.working_set.is_multiple_of(line_size) {
            return Err(KernelError::Spec(format!(
                "working_set {} is not a positive multiple of the {line_size}-byte line",
                self.working_set
            )));
        }
        if self.pattern.is_strided() && (self.stride == 0 || !self.stride.is_multiple_of(line_size)) {
            return Err(KernelError::Spec(format!(
                "stride {} is not a positive multiple of the {line_size}-byte line",
                self.stride
            )));
        }
        if self.inner_ops == 0 {
            return Err(KernelError::Spec("inner_ops must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lines(&self, line_size: u64) -> usize {
        (self.working_set / line_size) as usize
    }

    fn line_step(&self, line_size: u64) -> usize {
        if self.pattern.is_strided() {
            (self.stride / line_size) as usize
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SizingIntent {
    Thrash,
    Resident,
}

fn round_up(bytes: u64, line: u64) -> u64 {
    bytes.div_ceil(line).max(1) * line
}

/// Working-set size that thrashes (2x capacity) or stays resident in
/// (capacity / 2) the resource behind `target`.
pub fn size_working_set(target: &InterferenceChannel, intent: SizingIntent, t: &Topology) -> Result<u64, KernelError> {
    let unresolved = || KernelError::Unresolved(target.id.clone());
    if target.scope.iter().any(|c| !t.core_ids.contains(c)) {
        return Err(unresolved());
    }
    let bytes = match target.resource {
        ResourceKind::SharedCache | ResourceKind::CacheBank | ResourceKind::PrivateCacheCoherency => {
            let level = target.cache_level.ok_or_else(unresolved)?;
            let core = *target.scope.iter().next().ok_or_else(unresolved)?;
            let cache = t.cache_at(core, level).ok_or_else(unresolved)?;
            match intent {
                SizingIntent::Thrash => cache.capacity * 2,
                SizingIntent::Resident => cache.capacity / 2,
            }
        }
        ResourceKind::DramBandwidth | ResourceKind::DramBank | ResourceKind::Interconnect => {
            if intent == SizingIntent::Resident {
                return Err(KernelError::Argument(format!(
                    "`{}` is memory-side; a resident working set is not meaningful",
                    target.id
                )));
            }
            let largest = target
                .scope
                .iter()
                .flat_map(|&c| t.caches_of(c))
                .map(|c| c.capacity)
                .max()
                .unwrap_or(0);
            largest * 2
        }
    };
    Ok(round_up(bytes, t.line_size))
}

/// Seeded single-cycle permutation (Sattolo's algorithm): following
/// `i -> p[i]` from any index visits all `n` indices before returning.
pub fn build_pointer_chase(n_lines: usize, seed: u64) -> Result<Vec<usize>, KernelError> {
    if n_lines == 0 {
        return Err(KernelError::Argument("n_lines must be at least 1".into()));
    }
    let mut next: Vec<usize> = (0..n_lines).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n_lines).rev() {
        let j = rng.random_range(0..i);
        next.swap(i, j);
    }
    Ok(next)
}

/// Line-aligned buffer a kernel runs over.
///
/// Word 0 of line `i` holds `i`. For pointer-chase arenas word 1 holds the
/// successor line. Words are accessed with relaxed atomics, which compile to
/// plain loads and stores; ping-pong arenas are shared across threads.
pub struct Arena {
    ptr: NonNull<AtomicU64>,
    layout: Layout,
    line_words: usize,
    lines: usize,
    chase_order: Option<Vec<usize>>,
    shared: bool,
}

// SAFETY: the buffer is only reached through `&AtomicU64`.
unsafe impl Send for Arena {}
unsafe impl Sync for Arena {}

impl Arena {
    pub fn build(spec: &KernelSpec, line_size: u64) -> Result<Self, KernelError> {
        spec.validate(line_size)?;
        let lines = spec.lines(line_size);
        let layout = Layout::from_size_align(spec.working_set as usize, line_size as usize)
            .map_err(|e| KernelError::Argument(e.to_string()))?;
        // SAFETY: layout has non-zero size (working_set >= one line).
        let raw = unsafe { alloc::alloc_zeroed(layout) } as *mut AtomicU64;
        let ptr = NonNull::new(raw).ok_or(KernelError::Alloc(spec.working_set))?;
        let mut arena = Arena {
            ptr,
            layout,
            line_words: (line_size / 8) as usize,
            lines,
            chase_order: None,
            shared: spec.pattern == AccessPattern::SharedLinePingpong,
        };
        for i in 0..lines {
            arena.word(i, 0).store(i as u64, Ordering::Relaxed);
        }
        if spec.pattern == AccessPattern::PointerChase {
            let next = build_pointer_chase(lines, spec.seed)?;
            for (i, &n) in next.iter().enumerate() {
                arena.word(i, 1).store(n as u64, Ordering::Relaxed);
            }
            arena.chase_order = Some(next);
        }
        Ok(arena)
    }

    #[inline(always)]
    fn word(&self, line: usize, w: usize) -> &AtomicU64 {
        debug_assert!(line < self.lines && w < self.line_words);
        // SAFETY: index is within the allocation; zeroed memory is a valid AtomicU64.
        unsafe { &*self.ptr.as_ptr().add(line * self.line_words + w) }
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn line_size(&self) -> usize {
        self.line_words * 8
    }

    pub fn alignment(&self) -> usize {
        self.layout.align()
    }

    pub fn base_addr(&self) -> usize {
        self.ptr.as_ptr() as usize
    }

    pub fn chase_order(&self) -> Option<&[usize]> {
        self.chase_order.as_deref()
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn first_word(&self, line: usize) -> u64 {
        self.word(line, 0).load(Ordering::Relaxed)
    }
}

impl Drop for Arena {
    fn drop(&mut self) {
        // SAFETY: allocated in `build` with this layout.
        unsafe { alloc::dealloc(self.ptr.as_ptr() as *mut u8, self.layout) }
    }
}

impl std::fmt::Debug for Arena {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Arena")
            .field("lines", &self.lines)
            .field("line_size", &self.line_size())
            .field("shared", &self.shared)
            .finish()
    }
}

/// Executes a kernel's accesses one iteration at a time.
pub struct KernelRunner<'a> {
    arena: &'a Arena,
    pattern: AccessPattern,
    inner_ops: u64,
    step: usize,
    seed: u64,
    cursor: usize,
    ops_done: u64,
    checksum: u64,
}

impl<'a> KernelRunner<'a> {
    pub fn new(spec: &KernelSpec, arena: &'a Arena) -> Result<Self, KernelError> {
        let line_size = arena.line_size() as u64;
        spec.validate(line_size)?;
        if spec.lines(line_size) != arena.lines() {
            return Err(KernelError::Argument(format!(
                "arena has {} lines, spec needs {}",
                arena.lines(),
                spec.lines(line_size)
            )));
        }
        if spec.pattern == AccessPattern::PointerChase && arena.chase_order.is_none() {
            return Err(KernelError::Argument("arena was not built for pointer chasing".into()));
        }
        Ok(KernelRunner {
            arena,
            pattern: spec.pattern,
            inner_ops: spec.inner_ops,
            step: spec.line_step(line_size),
            seed: spec.seed,
            cursor: 0,
            ops_done: 0,
            checksum: 0,
        })
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn inner_ops(&self) -> u64 {
        self.inner_ops
    }

    /// One measured iteration.
    #[inline]
    pub fn iterate(&mut self) {
        self.run_ops(self.inner_ops, |_| {});
        black_box(self.checksum);
    }

    /// Runs `ops` accesses, reporting each touched line to `on_line`.
    #[inline(always)]
    pub fn run_ops<F: FnMut(usize)>(&mut self, ops: u64, mut on_line: F) {
        let arena = self.arena;
        let lines = arena.lines;
        let last = arena.line_words - 1;
        let mut cursor = self.cursor;
        let mut sum = self.checksum;
        let base = self.ops_done;
        match self.pattern {
            AccessPattern::SeqRead | AccessPattern::StridedRead => {
                for _ in 0..ops {
                    on_line(cursor);
                    sum = sum.wrapping_add(arena.word(cursor, 0).load(Ordering::Relaxed));
                    cursor = (cursor + self.step) % lines;
                }
            }
            AccessPattern::SeqWrite | AccessPattern::StridedWrite => {
                for i in 0..ops {
                    on_line(cursor);
                    let value = (base + i) ^ self.seed;
                    arena.word(cursor, last).store(value, Ordering::Relaxed);
                    sum = sum.wrapping_add(value);
                    cursor = (cursor + self.step) % lines;
                }
            }
            AccessPattern::PointerChase => {
                for _ in 0..ops {
                    on_line(cursor);
                    let next = arena.word(cursor, 1).load(Ordering::Relaxed);
                    sum = sum.wrapping_add(next);
                    cursor = next as usize;
                }
            }
            AccessPattern::SharedLinePingpong => {
                for i in 0..ops {
                    on_line(cursor);
                    let v = arena.word(cursor, 0).load(Ordering::Relaxed);
                    arena.word(cursor, 1).store(v.wrapping_add(base + i), Ordering::Relaxed);
                    sum = sum.wrapping_add(v);
                    cursor = (cursor + 1) % lines;
                }
            }
        }
        self.cursor = cursor;
        self.checksum = sum;
        self.ops_done = base + ops;
    }
}

/// Line indices touched by the first `ops` accesses of `spec` on a fresh runner.
pub fn touched_lines(spec: &KernelSpec, arena: &Arena, ops: u64) -> Result<Vec<usize>, KernelError> {
    let mut runner = KernelRunner::new(spec, arena)?;
    let mut out = Vec::with_capacity(ops as usize);
    runner.run_ops(ops, |l| out.push(l));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelTrace {
    pub durations_ns: Vec<u64>,
    pub checksum: u64,
    pub iterations_completed: u64,
}

fn elapsed_ns(from: Instant) -> u64 {
    (from.elapsed().as_nanos() as u64).max(1)
}

/// Runs `samples` measured iterations, checking `stop` between iterations.
/// Durations are floored at 1 ns.
pub fn run_kernel(
    spec: &KernelSpec,
    arena: &Arena,
    samples: u64,
    stop: &AtomicBool,
) -> Result<KernelTrace, KernelError> {
    let mut runner = KernelRunner::new(spec, arena)?;
    let mut durations_ns = Vec::with_capacity(samples as usize);
    for _ in 0..samples {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        let begin = Instant::now();
        runner.iterate();
        durations_ns.push(elapsed_ns(begin));
    }
    Ok(KernelTrace {
        iterations_completed: durations_ns.len() as u64,
        durations_ns,
        checksum: runner.checksum(),
    })
}

pub const CALIBRATION_ROUNDS: usize = 20;

/// Adjusts `inner_ops` until the median iteration is within 25% of
/// `target_window`, measuring with `measure` (returns a median in ns).
pub fn calibrate_with<F>(spec: &KernelSpec, target_window: Duration, mut measure: F) -> Result<KernelSpec, KernelError>
where
    F: FnMut(&KernelSpec) -> Result<u64, KernelError>,
{
    let target = target_window.as_nanos() as f64;
    if target < 1_000.0 {
        return Err(KernelError::Argument(format!(
            "target window {target_window:?} is below 1 us"
        )));
    }
    let mut current = spec.clone();
    let mut medians = Vec::new();
    for _ in 0..CALIBRATION_ROUNDS {
        let median = measure(&current)?.max(1);
        medians.push(median);
        let ratio = median as f64 / target;
        if (0.75..=1.25).contains(&ratio) {
            return Ok(current);
        }
        let scaled = (current.inner_ops as f64 / ratio).round().max(1.0) as u64;
        current.inner_ops = scaled;
    }
    Err(KernelError::Calibration {
        rounds: CALIBRATION_ROUNDS,
        medians,
    })
}

/// Calibrates by trial runs on the calling thread.
pub fn calibrate(spec: &KernelSpec, t: &Topology, target_window: Duration) -> Result<KernelSpec, KernelError> {
    spec.validate(t.line_size)?;
    let arena = Arena::build(spec, t.line_size)?;
    let stop = AtomicBool::new(false);
    calibrate_with(spec, target_window, |trial| {
        let trace = run_kernel(trial, &arena, 11, &stop)?;
        let mut d = trace.durations_ns[1..].to_vec();
        d.sort_unstable();
        Ok(d[d.len() / 2])
    })
}

/// Expected reading of a known-count kernel: `expected` events, with
/// `slack` events of measurement-bracket overhead allowed on top of the
/// tolerance band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCount {
    pub expected: u64,
    pub slack: u64,
    /// Default relative band for this event class.
    pub default_tolerance: f64,
}

/// Bracket overhead allowance, in events.
pub const WINDOW_SLACK: u64 = 64;

/// A kernel whose execution of `k` accesses has a closed-form count for `event`.
pub fn known_count_kernel(
    event: CounterEvent,
    k: u64,
    t: &Topology,
) -> Result<(KernelSpec, ExpectedCount), KernelError> {
    if k == 0 {
        return Err(KernelError::Argument("k must be at least 1".into()));
    }
    let core = t.core_ids[0];
    let mut path: Vec<_> = t.caches_of(core).collect();
    path.sort_by_key(|c| c.level);
    let line = t.line_size;
    let exact = |pattern, working_set| {
        (
            KernelSpec {
                target: format!("verify-{event}"),
                pattern,
                working_set,
                stride: line,
                inner_ops: k,
                seed: 0x5eed,
            },
            ExpectedCount {
                expected: k,
                slack: WINDOW_SLACK,
                default_tolerance: 0.0,
            },
        )
    };
    let chase = |capacity: u64| {
        let (spec, mut model) = exact(AccessPattern::PointerChase, round_up(2 * capacity, line));
        model.default_tolerance = 0.05;
        (spec, model)
    };
    let small = path.first().map_or(line, |c| round_up(c.capacity / 2, line));
    match event {
        CounterEvent::LoadsRetired => Ok(exact(AccessPattern::SeqRead, small)),
        CounterEvent::StoresRetired => Ok(exact(AccessPattern::SeqWrite, small)),
        CounterEvent::L1dMisses => path
            .first()
            .map(|c| chase(c.capacity))
            .ok_or(KernelError::UnsupportedEvent(event)),
        CounterEvent::SharedCacheMisses => path
            .iter()
            .find(|c| c.is_shared())
            .map(|c| chase(c.capacity))
            .ok_or(KernelError::UnsupportedEvent(event)),
        CounterEvent::LlcMisses | CounterEvent::DramReads => path
            .last()
            .map(|c| chase(c.capacity))
            .ok_or(KernelError::UnsupportedEvent(event)),
        CounterEvent::BusCycles | CounterEvent::CoherencySnoops => Err(KernelError::UnsupportedEvent(event)),
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Steady-state architectural activity of `ops` accesses of `spec` on `core`.
///
/// Every access misses a cache level whose capacity is below the kernel's
/// footprint and hits otherwise. This is the model the simulated counter
/// backend replays.
pub fn kernel_activity(spec: &KernelSpec, t: &Topology, core: CoreId, ops: u64) -> Activity {
    let lines = spec.lines(t.line_size).max(1);
    let distinct = match spec.pattern {
        p if p.is_strided() => lines / gcd(spec.line_step(t.line_size) % lines, lines).max(1),
        _ => lines,
    };
    let footprint = distinct as u64 * t.line_size;
    let mut path: Vec<_> = t.caches_of(core).collect();
    path.sort_by_key(|c| c.level);
    let misses_at = |cap: Option<u64>| match cap {
        Some(c) if footprint <= c => 0,
        _ => ops,
    };
    let mut a = Activity::default();
    match spec.pattern {
        AccessPattern::SeqRead | AccessPattern::StridedRead | AccessPattern::PointerChase => a.loads = ops,
        AccessPattern::SeqWrite | AccessPattern::StridedWrite => a.stores = ops,
        AccessPattern::SharedLinePingpong => {
            a.loads = ops;
            a.stores = ops;
            a.snoops = ops;
            a.l1d_misses = ops;
            return a;
        }
    }
    a.l1d_misses = misses_at(path.first().map(|c| c.capacity));
    a.shared_cache_misses = path
        .iter()
        .find(|c| c.is_shared())
        .map_or(0, |c| misses_at(Some(c.capacity)));
    a.llc_misses = misses_at(path.last().map(|c| c.capacity));
    a.dram_reads = a.llc_misses;
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::platform::{derive_default_catalog, load_topology};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn quad() -> Topology {
        load_topology(
            r#"{"cores": [0,1,2,3], "line_size": 64, "caches": [
                {"level": 1, "capacity": 32768, "associativity": 8, "shared_by": [0]},
                {"level": 1, "capacity": 32768, "associativity": 8, "shared_by": [1]},
                {"level": 1, "capacity": 32768, "associativity": 8, "shared_by": [2]},
                {"level": 1, "capacity": 32768, "associativity": 8, "shared_by": [3]},
                {"level": 2, "capacity": 1048576, "associativity": 16, "shared_by": [0,1,2,3]},
                {"level": 3, "capacity": 8388608, "associativity": 16, "shared_by": [0,1,2,3]}
            ], "dram_nodes": 1}"#,
        )
        .unwrap()
    }

    fn spec(pattern: AccessPattern, working_set: u64, inner_ops: u64) -> KernelSpec {
        KernelSpec {
            target: "t".into(),
            pattern,
            working_set,
            stride: 64,
            inner_ops,
            seed: 7,
        }
    }

    fn walk(next: &[usize]) -> usize {
        let mut seen = BTreeSet::new();
        let mut i = 0;
        loop {
            if !seen.insert(i) {
                break;
            }
            i = next[i];
        }
        assert_eq!(i, 0, "walk must return to the start");
        seen.len()
    }

    #[test]
    fn sizing_rules() {
        let t = quad();
        let c = derive_default_catalog(&t);
        let l2 = c.get("shared-l2-c0c1c2c3").unwrap();
        assert_eq!(size_working_set(l2, SizingIntent::Thrash, &t).unwrap(), 2 << 20);
        let coh = c
            .channels
            .iter()
            .find(|c| c.resource == ResourceKind::PrivateCacheCoherency)
            .unwrap();
        assert_eq!(size_working_set(coh, SizingIntent::Resident, &t).unwrap(), 16 << 10);
        let dram = c.get("dram-bw-n0").unwrap();
        assert_eq!(size_working_set(dram, SizingIntent::Thrash, &t).unwrap(), 16 << 20);
        assert!(size_working_set(dram, SizingIntent::Resident, &t).is_err());
        let mut stray = l2.clone();
        stray.cache_level = Some(5);
        assert!(matches!(
            size_working_set(&stray, SizingIntent::Thrash, &t),
            Err(KernelError::Unresolved(_))
        ));
    }

    #[test]
    fn small_chases() {
        assert_eq!(build_pointer_chase(1, 3).unwrap(), vec![0]);
        assert_eq!(build_pointer_chase(2, 3).unwrap(), vec![1, 0]);
        let p = build_pointer_chase(8, 42).unwrap();
        assert_eq!(walk(&p), 8);
        assert_eq!(p, build_pointer_chase(8, 42).unwrap());
        assert!(build_pointer_chase(0, 1).is_err());
    }

    proptest! {
        #[test]
        fn chase_is_single_cycle(n in 1usize..4096, seed in any::<u64>()) {
            let p = build_pointer_chase(n, seed).unwrap();
            prop_assert_eq!(walk(&p), n);
        }

        #[test]
        fn access_sequence_replays(
            pattern in prop::sample::select(vec![
                AccessPattern::SeqRead, AccessPattern::SeqWrite, AccessPattern::StridedRead,
                AccessPattern::StridedWrite, AccessPattern::PointerChase, AccessPattern::SharedLinePingpong,
            ]),
            lines in 1u64..256,
            stride_lines in 1u64..8,
            seed in any::<u64>(),
        ) {
            let mut s = spec(pattern, lines * 64, 300);
            s.stride = stride_lines * 64;
            s.seed = seed;
            let a = Arena::build(&s, 64).unwrap();
            let b = Arena::build(&s, 64).unwrap();
            prop_assert_eq!(touched_lines(&s, &a, 300).unwrap(), touched_lines(&s, &b, 300).unwrap());
        }
    }

    #[test]
    fn arena_layout() {
        let s = spec(AccessPattern::PointerChase, 64 * 128, 1);
        let a = Arena::build(&s, 64).unwrap();
        assert_eq!(a.base_addr() % 64, 0);
        assert!(a.alignment() >= 64);
        assert_eq!(a.lines(), 128);
        assert_eq!(a.first_word(17), 17);
        assert_eq!(walk(a.chase_order().unwrap()), 128);
    }

    #[test]
    fn spec_validation() {
        assert!(spec(AccessPattern::SeqRead, 100, 1).validate(64).is_err());
        assert!(spec(AccessPattern::SeqRead, 0, 1).validate(64).is_err());
        assert!(spec(AccessPattern::SeqRead, 64, 0).validate(64).is_err());
        let mut s = spec(AccessPattern::StridedRead, 640, 1);
        s.stride = 96;
        assert!(s.validate(64).is_err());
    }

    #[test]
    fn run_kernel_structure() {
        let s = spec(AccessPattern::SeqRead, 64 * 64, 64);
        let a = Arena::build(&s, 64).unwrap();
        let t = run_kernel(&s, &a, 100, &AtomicBool::new(false)).unwrap();
        assert_eq!(t.durations_ns.len(), 100);
        assert_eq!(t.iterations_completed, 100);
        assert!(t.durations_ns.iter().all(|&d| d > 0));
    }

    #[test]
    fn stop_before_first_iteration() {
        let s = spec(AccessPattern::SeqRead, 64 * 64, 64);
        let a = Arena::build(&s, 64).unwrap();
        let t = run_kernel(&s, &a, 100, &AtomicBool::new(true)).unwrap();
        assert_eq!(t.iterations_completed, 0);
        assert!(t.durations_ns.is_empty());
        assert_eq!(t.checksum, 0);
    }

    #[test]
    fn seq_read_checksum_closed_form() {
        // Oracle: line i's first word is i, one pass reads each line once.
        for lines in [1u64, 2, 7, 64, 1000] {
            let s = spec(AccessPattern::SeqRead, lines * 64, lines);
            let a = Arena::build(&s, 64).unwrap();
            let expected: u64 = (0..lines).map(|i| a.first_word(i as usize)).sum();
            assert_eq!(expected, lines * (lines - 1) / 2);
            let t = run_kernel(&s, &a, 1, &AtomicBool::new(false)).unwrap();
            assert_eq!(t.checksum, expected);
        }
    }

    #[test]
    fn checksum_reproducible() {
        for pattern in [
            AccessPattern::PointerChase,
            AccessPattern::SeqWrite,
            AccessPattern::StridedRead,
        ] {
            let s = spec(pattern, 64 * 50, 77);
            let run = || {
                let a = Arena::build(&s, 64).unwrap();
                run_kernel(&s, &a, 3, &AtomicBool::new(false)).unwrap().checksum
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn pingpong_kernels_share_line_set() {
        let s = spec(AccessPattern::SharedLinePingpong, 64 * 16, 40);
        let arena = std::sync::Arc::new(Arena::build(&s, 64).unwrap());
        assert!(arena.is_shared());
        let sets: Vec<BTreeSet<usize>> = (0..2)
            .map(|_| {
                let arena = arena.clone();
                let s = s.clone();
                std::thread::spawn(move || touched_lines(&s, &arena, 40).unwrap().into_iter().collect())
            })
            .map(|h| h.join().unwrap())
            .collect();
        assert_eq!(sets[0], sets[1]);
    }

    #[test]
    fn calibration_fixed_point_and_direction() {
        let s = spec(AccessPattern::SeqRead, 64 * 64, 1000);
        let target = Duration::from_micros(10);
        // 10 ns per op: 1000 ops hits 10 us exactly.
        let out = calibrate_with(&s, target, |k| Ok(k.inner_ops * 10)).unwrap();
        assert_eq!(out, s);
        // 100 ns per op: first trial is 10x too long.
        let mut seen = Vec::new();
        let out = calibrate_with(&s, target, |k| {
            seen.push(k.inner_ops);
            Ok(k.inner_ops * 100)
        })
        .unwrap();
        assert!(out.inner_ops < s.inner_ops);
        assert_eq!(seen[0], 1000);
        assert!(seen[1] < seen[0]);
        assert!(matches!(
            calibrate_with(&s, Duration::ZERO, |_| Ok(1)),
            Err(KernelError::Argument(_))
        ));
        let err = calibrate_with(&s, target, |_| Ok(1_000_000)).unwrap_err();
        assert!(matches!(err, KernelError::Calibration { rounds: 20, .. }));
    }

    #[test]
    fn calibrate_on_host_converges() {
        let t = quad();
        let s = spec(AccessPattern::SeqRead, 64 * 256, 16);
        let out = calibrate(&s, &t, Duration::from_micros(200)).unwrap();
        assert!(out.inner_ops > s.inner_ops);
    }

    #[test]
    fn known_count_models() {
        let t = quad();
        let (s, m) = known_count_kernel(CounterEvent::LoadsRetired, 1000, &t).unwrap();
        assert_eq!(s.inner_ops, 1000);
        assert_eq!(m.expected, 1000);
        assert_eq!(m.default_tolerance, 0.0);
        let (s, m) = known_count_kernel(CounterEvent::LlcMisses, 5000, &t).unwrap();
        assert_eq!(s.pattern, AccessPattern::PointerChase);
        assert_eq!(s.working_set, 16 << 20);
        assert_eq!(m.default_tolerance, 0.05);
        assert!(matches!(
            known_count_kernel(CounterEvent::BusCycles, 10, &t),
            Err(KernelError::UnsupportedEvent(CounterEvent::BusCycles))
        ));
    }

    #[test]
    fn activity_model() {
        let t = quad();
        let resident = spec(AccessPattern::SeqRead, 16 << 10, 100);
        let a = kernel_activity(&resident, &t, 0, 100);
        assert_eq!((a.loads, a.l1d_misses, a.llc_misses), (100, 0, 0));
        let thrash = spec(AccessPattern::PointerChase, 16 << 20, 100);
        let a = kernel_activity(&thrash, &t, 0, 100);
        assert_eq!(
            (a.l1d_misses, a.shared_cache_misses, a.llc_misses, a.dram_reads),
            (100, 100, 100, 100)
        );
    }
}
